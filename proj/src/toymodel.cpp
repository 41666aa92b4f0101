#include "pkit/toymodel.hpp"

#include <json.hpp>

#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <thread>

namespace pkit {

namespace {

using nlohmann::json;

Matrix attention_mix(Index seq) {
  // Fixed causal softmax mixing with exponentially decaying scores.
  Matrix p = Matrix::Zero(seq, seq);
  for (Index i = 0; i < seq; ++i) {
    double denom = 0.0;
    for (Index j = 0; j <= i; ++j) denom += std::exp(-0.5 * double(i - j));
    for (Index j = 0; j <= i; ++j) p(i, j) = std::exp(-0.5 * double(i - j)) / denom;
  }
  return p;
}

Matrix activate(const MatrixRef& z, Activation act) {
  switch (act) {
    case Activation::Relu:
      return z.cwiseMax(0.0);
    case Activation::Gelu:
      return z.unaryExpr([](double v) {
        return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
      });
    case Activation::AttentionStub:
      return attention_mix(z.rows()) * z;
  }
  return z;
}

struct ForwardCapture {
  TokenFrequency* freq = nullptr;
  std::vector<CorrelationAccumulator>* in_corr = nullptr;
  std::vector<CorrelationAccumulator>* out_corr = nullptr;
  std::vector<CorrelationAccumulator>* stacked_corr = nullptr;
};

Matrix forward_impl(const ToyNetwork& net, const std::vector<std::int64_t>& ids,
                    ForwardCapture* cap) {
  const Index n = net.dim();
  const Index seq = static_cast<Index>(ids.size());
  require(seq > 0, ErrorCode::ShapeMismatch, "forward: empty token sequence");
  Matrix s(seq, n);
  for (Index t = 0; t < seq; ++t) {
    require(ids[t] >= 0 && ids[t] < net.vocab(), ErrorCode::IdOutOfRange,
            "forward: token id out of range");
    s.row(t) = net.w_emb.row(ids[t]);
    if (cap && cap->freq) ++cap->freq->counts[static_cast<std::size_t>(ids[t])];
  }
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const ToyBlock& blk = net.blocks[b];
    const Matrix u = rmsnorm_rows_safe(s);
    if (cap && cap->in_corr) (*cap->in_corr)[b].accumulate(u);
    Matrix z = u * blk.w_in;
    if (blk.b_in.size() > 0) z.rowwise() += blk.b_in.transpose();
    const Matrix a = activate(z, blk.act);
    if (cap && cap->out_corr) (*cap->out_corr)[b].accumulate(a);
    if (cap && cap->stacked_corr) {
      Matrix stacked(seq, a.cols() + n);
      stacked << a, s;
      (*cap->stacked_corr)[b].accumulate(stacked);
    }
    Matrix y = a * blk.w_out;
    if (blk.b_out.size() > 0) y.rowwise() += blk.b_out.transpose();
    if (blk.skip)
      s = (blk.skip_matrix.size() > 0 ? Matrix(s * blk.skip_matrix) : s) + y;
    else
      s = std::move(y);
  }
  const Matrix u = rmsnorm_rows_safe(s);
  if (cap && cap->in_corr) (*cap->in_corr)[net.blocks.size()].accumulate(u);
  Matrix logits = u * net.w_head;
  require(logits.allFinite(), ErrorCode::NonFinite,
          "forward: non-finite logits");
  return logits;
}

}  // namespace

Vector rmsnorm(const VectorRef& x) {
  const double norm = x.norm();
  require(norm > 0.0, ErrorCode::ZeroVector, "rmsnorm: zero vector");
  return x / norm;
}

Matrix rmsnorm_rows_safe(const MatrixRef& x) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double norm = x.row(i).norm();
    out.row(i) = norm > 0.0 ? (x.row(i) / norm).eval() : x.row(i).eval();
  }
  return out;
}

Matrix forward(const ToyNetwork& net, const std::vector<std::int64_t>& ids) {
  return forward_impl(net, ids, nullptr);
}

ToyNetwork rotate_network(const ToyNetwork& net, const std::vector<Matrix>& qs) {
  const Index n = net.dim();
  require(static_cast<Index>(qs.size()) == net.n_junctions(),
          ErrorCode::ShapeMismatch, "rotate_network: one rotation per junction");
  for (const Matrix& q : qs)
    require(q.rows() == n && is_orthogonal(q), ErrorCode::NotOrthogonal,
            "rotate_network: rotation is not orthogonal");
  ToyNetwork out = net;
  out.w_emb = net.w_emb * qs[0];
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    ToyBlock& blk = out.blocks[b];
    blk.w_in = qs[b].transpose() * blk.w_in;
    blk.w_out = blk.w_out * qs[b + 1];
    if (blk.b_out.size() > 0) blk.b_out = qs[b + 1].transpose() * blk.b_out;
    if (blk.skip) {
      const Matrix m = blk.skip_matrix.size() > 0 ? blk.skip_matrix
                                                  : Matrix(Matrix::Identity(n, n));
      blk.skip_matrix = qs[b].transpose() * m * qs[b + 1];
    }
  }
  out.w_head = qs.back().transpose() * net.w_head;
  return out;
}

ToyNetwork generate_toy_network(std::uint64_t seed, Index n_blocks, Index dim,
                                Index hidden, Index vocab) {
  require(n_blocks >= 1 && dim >= 2 && hidden >= 3 && vocab >= 2,
          ErrorCode::ShapeMismatch, "generate_toy_network: sizes too small");
  require(hidden % 3 == 0, ErrorCode::NotDivisible,
          "generate_toy_network: hidden size must be divisible by 3 for the "
          "stacked attention projections");
  Rng rng(seed);
  ToyNetwork net;
  net.w_emb = rng.gaussian(vocab, dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Index b = 0; b < n_blocks; ++b) {
    ToyBlock blk;
    blk.w_in = scale * rng.gaussian(dim, hidden);
    blk.w_out = scale * rng.gaussian(hidden, dim);
    blk.b_in = 0.01 * rng.gaussian(hidden, 1);
    blk.act = b % 2 == 0 ? Activation::AttentionStub : Activation::Gelu;
    blk.skip = true;
    net.blocks.push_back(std::move(blk));
  }
  net.w_head = scale * rng.gaussian(dim, vocab);
  return net;
}

// ----- calibration -----------------------------------------------------------

NetworkCalibration collect_calibration(
    const ToyNetwork& net,
    const std::vector<std::vector<std::int64_t>>& batches) {
  NetworkCalibration calib;
  const Index nb = net.n_blocks();
  calib.freq.counts.assign(static_cast<std::size_t>(net.vocab()), 0);
  for (Index b = 0; b <= nb; ++b)
    calib.in_corr.emplace_back(net.dim());
  for (Index b = 0; b < nb; ++b) {
    calib.out_corr.emplace_back(net.blocks[b].hidden());
    calib.stacked_corr.emplace_back(net.blocks[b].hidden() + net.dim());
  }
  ForwardCapture cap;
  cap.freq = &calib.freq;
  cap.in_corr = &calib.in_corr;
  cap.out_corr = &calib.out_corr;
  cap.stacked_corr = &calib.stacked_corr;
  for (const auto& ids : batches) {
    forward_impl(net, ids, &cap);
    ++calib.sequences;
  }
  return calib;
}

NetworkCalibration NetworkCalibration::rotated(
    const ToyNetwork& net, const std::vector<Matrix>& qs) const {
  NetworkCalibration out;
  out.freq = freq;
  out.sequences = sequences;
  const Index nb = net.n_blocks();
  for (Index b = 0; b <= nb; ++b) {
    const Matrix& q = qs[static_cast<std::size_t>(b)];
    out.in_corr.push_back(CorrelationAccumulator::from_sum(
        q.transpose() * in_corr[static_cast<std::size_t>(b)].sum() * q,
        in_corr[static_cast<std::size_t>(b)].samples()));
  }
  for (Index b = 0; b < nb; ++b) {
    out.out_corr.push_back(out_corr[static_cast<std::size_t>(b)]);
    const Index h = net.blocks[static_cast<std::size_t>(b)].hidden();
    const Index n = net.dim();
    const Matrix& s = stacked_corr[static_cast<std::size_t>(b)].sum();
    Matrix t(h + n, h + n);
    const Matrix& q = qs[static_cast<std::size_t>(b)];
    t.topLeftCorner(h, h) = s.topLeftCorner(h, h);
    t.topRightCorner(h, n) = s.topRightCorner(h, n) * q;
    t.bottomLeftCorner(n, h) = q.transpose() * s.bottomLeftCorner(n, h);
    t.bottomRightCorner(n, n) = q.transpose() * s.bottomRightCorner(n, n) * q;
    out.stacked_corr.push_back(CorrelationAccumulator::from_sum(
        std::move(t), stacked_corr[static_cast<std::size_t>(b)].samples()));
  }
  return out;
}

void save_calibration(const std::filesystem::path& dir,
                      const NetworkCalibration& calib) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json meta;
  meta["sequences"] = calib.sequences;
  meta["vocab"] = calib.freq.vocab();
  json counts = json::array();
  for (std::int64_t c : calib.freq.counts) counts.push_back(c);
  meta["token_counts"] = counts;
  json samples = json::object();
  auto dump = [&](const char* name,
                  const std::vector<CorrelationAccumulator>& accs) {
    json arr = json::array();
    for (std::size_t i = 0; i < accs.size(); ++i) {
      write_matrix(dir / (std::string(name) + std::to_string(i) + ".tensor"),
                   accs[i].sum());
      arr.push_back(accs[i].samples());
    }
    samples[name] = arr;
  };
  dump("in_corr", calib.in_corr);
  dump("out_corr", calib.out_corr);
  dump("stacked_corr", calib.stacked_corr);
  meta["samples"] = samples;
  atomic_write_text(dir / "calibration.json", meta.dump(2) + "\n");
}

NetworkCalibration load_calibration(const std::filesystem::path& dir) {
  std::ifstream in(dir / "calibration.json");
  if (!in)
    fail(ErrorCode::IoError, "cannot open " + (dir / "calibration.json").string());
  json meta = json::parse(in);
  NetworkCalibration calib;
  calib.sequences = meta.at("sequences").get<std::int64_t>();
  for (const auto& c : meta.at("token_counts"))
    calib.freq.counts.push_back(c.get<std::int64_t>());
  auto load = [&](const char* name) {
    std::vector<CorrelationAccumulator> accs;
    const json& arr = meta.at("samples").at(name);
    for (std::size_t i = 0; i < arr.size(); ++i) {
      Matrix s = read_matrix(dir / (std::string(name) + std::to_string(i) + ".tensor"));
      accs.push_back(CorrelationAccumulator::from_sum(std::move(s),
                                                      arr[i].get<std::int64_t>()));
    }
    return accs;
  };
  calib.in_corr = load("in_corr");
  calib.out_corr = load("out_corr");
  calib.stacked_corr = load("stacked_corr");
  return calib;
}

// ----- plan -------------------------------------------------------------------

namespace {

StructureSpec resolve_role(const RoleStructure& role, Index rows, Index cols,
                           bool rotated_rows) {
  switch (role.kind) {
    case StructureKind::None:
      return DenseSpec{};
    case StructureKind::Kron: {
      const KronShape shape = choose_kron_shape(
          rows, cols, role.r, role.q,
          rotated_rows ? KronSide::RotatedRows : KronSide::RotatedCols);
      return shape.spec;
    }
    case StructureKind::Gs: {
      GsSpec spec;
      spec.kl = role.kl;
      spec.kr = role.kr;
      spec.bl1 = role.bl1;
      spec.bl2 = role.bl2;
      spec.br1 = role.br1;
      spec.br2 = role.br2;
      const GsSpec r = spec.resolved();
      require(r.rows() == rows && r.cols() == cols, ErrorCode::BadConfig,
              "gs structure shape does not match the weight it targets");
      return r;
    }
    case StructureKind::BlockZero: {
      BlockZeroSpec spec;
      spec.d = role.d;
      spec.kind = rotated_rows ? BlockZeroKind::ZeroRows : BlockZeroKind::ZeroCols;
      require(spec.d <= (rotated_rows ? rows : cols), ErrorCode::BadConfig,
              "blockzero kept dimension exceeds the weight");
      return spec;
    }
  }
  return DenseSpec{};
}

Index junction_values_cols(const ToyNetwork& net, Index b) {
  if (b >= net.n_blocks()) return 0;
  const ToyBlock& blk = net.blocks[static_cast<std::size_t>(b)];
  // Attention blocks stack [queries, keys, values]; the values third is
  // rotated but never projected.
  return blk.act == Activation::AttentionStub ? blk.hidden() / 3 : 0;
}

}  // namespace

CompressionPlan build_plan(const ToyNetwork& net, const JobConfig& cfg, int jobs) {
  CompressionPlan plan;
  plan.lambda_mode = cfg.lambda_mode;
  plan.emb_weighting = cfg.emb_weighting;
  plan.frobenius_iters = cfg.frobenius_iters;
  plan.weighted_iters = cfg.weighted_iters;
  plan.cg_iters = cfg.cg_iters;
  plan.jobs = jobs;
  const Index n = net.dim();
  const Index nb = net.n_blocks();
  int blockzero_out = 0;
  for (Index b = 0; b <= nb; ++b) {
    JunctionPlan jp;
    const RoleStructure& out_role = b == 0 ? cfg.embedding : cfg.out;
    const Index out_rows = b == 0 ? net.vocab()
                                  : net.blocks[static_cast<std::size_t>(b - 1)]
                                        .w_out.rows();
    jp.spec_out = resolve_role(out_role, out_rows, n, /*rotated_rows=*/false);
    if (std::holds_alternative<BlockZeroSpec>(jp.spec_out)) ++blockzero_out;
    jp.values_cols = junction_values_cols(net, b);
    const RoleStructure& in_role = b == nb ? cfg.head : cfg.in;
    const Index in_cols =
        b == nb ? net.vocab()
                : net.blocks[static_cast<std::size_t>(b)].hidden() - jp.values_cols;
    jp.spec_in = resolve_role(in_role, n, in_cols, /*rotated_rows=*/true);
    plan.junctions.push_back(std::move(jp));
  }
  if (blockzero_out > 0) {
    require(blockzero_out == static_cast<int>(plan.junctions.size()),
            ErrorCode::BadConfig,
            "blockzero out/embedding roles select the slicing path and must "
            "be used for every junction");
    plan.slice_path = true;
  }
  return plan;
}

// ----- compression -------------------------------------------------------------

namespace {

void parallel_for(Index count, int jobs, const std::function<void(Index)>& fn) {
  if (jobs <= 1 || count <= 1) {
    for (Index i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::vector<std::thread> workers;
  const int n_workers = std::min<int>(jobs, static_cast<int>(count));
  for (int w = 0; w < n_workers; ++w)
    workers.emplace_back([&] {
      for (;;) {
        const Index i = next.fetch_add(1);
        if (i >= count) break;
        fn(i);
      }
    });
  for (auto& t : workers) t.join();
}

const Matrix& junction_out_weight(const ToyNetwork& net, Index b) {
  return b == 0 ? net.w_emb : net.blocks[static_cast<std::size_t>(b - 1)].w_out;
}

const Matrix& junction_in_weight(const ToyNetwork& net, Index b) {
  return b == net.n_blocks() ? net.w_head
                             : net.blocks[static_cast<std::size_t>(b)].w_in;
}

std::int64_t dense_params(const ToyNetwork& net) {
  std::int64_t total = net.w_emb.size() + net.w_head.size();
  for (const ToyBlock& b : net.blocks)
    total += b.w_in.size() + b.w_out.size() + b.b_in.size() + b.b_out.size();
  return total;
}

double heldout_error(const ToyNetwork& original, const ToyNetwork& compressed,
                     const std::vector<std::vector<std::int64_t>>& heldout) {
  double worst = 0.0;
  for (const auto& ids : heldout) {
    const Matrix ref = forward(original, ids);
    const Matrix got = forward(compressed, ids);
    const double denom = std::max(ref.norm(), 1e-300);
    worst = std::max(worst, (got - ref).norm() / denom);
  }
  return worst;
}

}  // namespace

CompressionResult compress_network(
    const ToyNetwork& net, const CompressionPlan& plan,
    const NetworkCalibration& calib,
    const std::vector<std::vector<std::int64_t>>& heldout) {
  const Index n = net.dim();
  const Index nb = net.n_blocks();
  const Index nj = net.n_junctions();
  require(static_cast<Index>(plan.junctions.size()) == nj, ErrorCode::ShapeMismatch,
          "compress_network: plan junction count mismatch");
  require(static_cast<Index>(calib.in_corr.size()) == nj, ErrorCode::ShapeMismatch,
          "compress_network: calibration junction count mismatch");

  CompressionResult result;
  auto& reports = result.report.junctions;
  reports.resize(static_cast<std::size_t>(nj));
  for (Index b = 0; b < nj; ++b) reports[static_cast<std::size_t>(b)].junction = b;

  const Vector emb_diag = embedding_weight(calib.freq, plan.emb_weighting);

  std::vector<Matrix> q_total(static_cast<std::size_t>(nj),
                              Matrix::Identity(n, n));
  std::vector<StructuredValue> out_values(static_cast<std::size_t>(nj));
  std::vector<StructuredValue> in_values(static_cast<std::size_t>(nj));
  std::vector<std::optional<StructuredValue>> skip_sliced(
      static_cast<std::size_t>(nb));

  if (!plan.slice_path) {
    // Phase 1: rotations in the plain Frobenius norm, one junction at a time.
    std::vector<Matrix> q_init(static_cast<std::size_t>(nj),
                               Matrix::Identity(n, n));
    parallel_for(nj, plan.jobs, [&](Index b) {
      JunctionReport& rep = reports[static_cast<std::size_t>(b)];
      try {
        const JunctionPlan& jp = plan.junctions[static_cast<std::size_t>(b)];
        LayerProblem p;
        p.w_out = junction_out_weight(net, b);
        const Matrix& w_in_full = junction_in_weight(net, b);
        p.w_in = w_in_full.leftCols(w_in_full.cols() - jp.values_cols);
        p.spec_out = jp.spec_out;
        p.spec_in = jp.spec_in;
        if (b == 0) p.frob_out_diag = emb_diag;
        if (b == nj - 1) p.frob_in_diag = emb_diag;
        AlsResult r = als_frobenius(p, plan.frobenius_iters);
        q_init[static_cast<std::size_t>(b)] = std::move(r.q);
        rep.frobenius = std::move(r.report);
      } catch (const std::exception& e) {
        rep.failed = true;
        rep.error = e.what();
      }
    });

    // Rotate the network and transport the calibration statistics, then run
    // the weighted phase on the rotated problem.
    const ToyNetwork net1 = rotate_network(net, q_init);
    const NetworkCalibration calib1 = calib.rotated(net, q_init);

    std::vector<Matrix> q_w(static_cast<std::size_t>(nj), Matrix::Identity(n, n));
    parallel_for(nj, plan.jobs, [&](Index b) {
      JunctionReport& rep = reports[static_cast<std::size_t>(b)];
      try {
        const JunctionPlan& jp = plan.junctions[static_cast<std::size_t>(b)];
        LayerProblem p;
        p.w_out = junction_out_weight(net1, b);
        const Matrix& w_in_full = junction_in_weight(net1, b);
        p.w_in = w_in_full.leftCols(w_in_full.cols() - jp.values_cols);
        p.spec_out = jp.spec_out;
        p.spec_in = jp.spec_in;
        p.xc_out = b == 0 ? Matrix(emb_diag.asDiagonal())
                          : calib1.out_corr[static_cast<std::size_t>(b - 1)].root();
        p.xc_in = calib1.in_corr[static_cast<std::size_t>(b)].root();
        p.lambda_in = compute_lambda_in(p, plan.lambda_mode);
        rep.lambda_in = p.lambda_in;
        AlsResult r = als_weighted(p, plan.weighted_iters, plan.cg_iters,
                                   plan.proj_iters);
        q_w[static_cast<std::size_t>(b)] = std::move(r.q);
        out_values[static_cast<std::size_t>(b)] = std::move(r.what_out);
        in_values[static_cast<std::size_t>(b)] = std::move(r.what_in);
        rep.weighted = std::move(r.report);
      } catch (const std::exception& e) {
        rep.failed = true;
        rep.error = e.what();
      }
    });

    for (Index b = 0; b < nj; ++b)
      q_total[static_cast<std::size_t>(b)] =
          q_init[static_cast<std::size_t>(b)] * q_w[static_cast<std::size_t>(b)];

    const ToyNetwork net2 = rotate_network(net1, q_w);
    // Failed junctions keep their rotated dense weights.
    for (Index b = 0; b < nj; ++b) {
      JunctionReport& rep = reports[static_cast<std::size_t>(b)];
      const JunctionPlan& jp = plan.junctions[static_cast<std::size_t>(b)];
      if (rep.failed) {
        out_values[static_cast<std::size_t>(b)] =
            DenseValue{junction_out_weight(net2, b)};
        const Matrix& w_in_full = junction_in_weight(net2, b);
        in_values[static_cast<std::size_t>(b)] = DenseValue{
            Matrix(w_in_full.leftCols(w_in_full.cols() - jp.values_cols))};
      }
    }
    result.network.net = net2;
  } else {
    // Principal-component slicing path: one rotation per junction from the
    // out-plus-skip objective with zero-column classes; the in-side rows
    // are sliced for free afterwards.
    parallel_for(nj, plan.jobs, [&](Index b) {
      JunctionReport& rep = reports[static_cast<std::size_t>(b)];
      try {
        SliceProblem sp;
        Index d = n;
        if (const auto* bz =
                std::get_if<BlockZeroSpec>(&plan.junctions[static_cast<std::size_t>(b)].spec_out))
          d = bz->d;
        if (b == 0) {
          Vector droot(net.vocab());
          for (Index i = 0; i < droot.size(); ++i)
            droot(i) = std::sqrt(static_cast<double>(
                calib.freq.counts[static_cast<std::size_t>(i)]));
          sp.x_out = droot.asDiagonal();
          sp.w_out = net.w_emb;
          sp.x_skip = Matrix::Zero(net.vocab(), n);
        } else {
          const Index h =
              net.blocks[static_cast<std::size_t>(b - 1)].hidden();
          const Matrix z =
              calib.stacked_corr[static_cast<std::size_t>(b - 1)].root();
          sp.x_out = z.leftCols(h);
          sp.w_out = net.blocks[static_cast<std::size_t>(b - 1)].w_out;
          sp.x_skip = z.rightCols(n);
        }
        SliceEquivResult se = slicegpt_equivalence_check(sp, d);
        q_total[static_cast<std::size_t>(b)] = std::move(se.q_generic);
        rep.slice_generic = se.objective_generic;
        rep.slice_pca = se.objective_pca;
        rep.slice_gap = se.gap;
      } catch (const std::exception& e) {
        rep.failed = true;
        rep.error = e.what();
      }
    });

    const ToyNetwork net2 = rotate_network(net, q_total);
    for (Index b = 0; b < nj; ++b) {
      const JunctionPlan& jp = plan.junctions[static_cast<std::size_t>(b)];
      Index d_out = n, d_in = n;
      if (const auto* bz = std::get_if<BlockZeroSpec>(&jp.spec_out)) d_out = bz->d;
      if (const auto* bz = std::get_if<BlockZeroSpec>(&jp.spec_in)) d_in = bz->d;
      if (reports[static_cast<std::size_t>(b)].failed) {
        d_out = n;
        d_in = n;
      }
      out_values[static_cast<std::size_t>(b)] = blockzero_project(
          junction_out_weight(net2, b), BlockZeroSpec{d_out, BlockZeroKind::ZeroCols});
      const Matrix& w_in_full = junction_in_weight(net2, b);
      in_values[static_cast<std::size_t>(b)] = blockzero_project(
          Matrix(w_in_full.leftCols(w_in_full.cols() - jp.values_cols)),
          BlockZeroSpec{d_in, BlockZeroKind::ZeroRows});
    }
    for (Index b = 0; b < nb; ++b) {
      const ToyBlock& blk = net2.blocks[static_cast<std::size_t>(b)];
      if (!blk.skip) continue;
      Index d_out = n;
      if (const auto* bz = std::get_if<BlockZeroSpec>(
              &plan.junctions[static_cast<std::size_t>(b + 1)].spec_out))
        d_out = bz->d;
      const Matrix slot = blk.skip_matrix.size() > 0 ? blk.skip_matrix
                                                     : Matrix(Matrix::Identity(n, n));
      skip_sliced[static_cast<std::size_t>(b)] = blockzero_project(
          slot, BlockZeroSpec{d_out, BlockZeroKind::ZeroCols});
    }
    result.network.net = net2;
  }

  // Materialize the compressed weights into the forward network.
  ToyNetwork& out_net = result.network.net;
  auto fill_weight = [&](Index b) {
    const JunctionPlan& jp = plan.junctions[static_cast<std::size_t>(b)];
    CompressedWeight cw_out{out_values[static_cast<std::size_t>(b)], {}};
    Matrix in_mat = materialize(in_values[static_cast<std::size_t>(b)]);
    CompressedWeight cw_in{in_values[static_cast<std::size_t>(b)], {}};
    Matrix& target_in = b == nj - 1
                            ? out_net.w_head
                            : out_net.blocks[static_cast<std::size_t>(b)].w_in;
    if (jp.values_cols > 0) {
      cw_in.excluded = target_in.rightCols(jp.values_cols);
      Matrix combined(in_mat.rows(), in_mat.cols() + jp.values_cols);
      combined << in_mat, cw_in.excluded;
      target_in = std::move(combined);
    } else {
      target_in = std::move(in_mat);
    }
    Matrix& target_out = b == 0
                             ? out_net.w_emb
                             : out_net.blocks[static_cast<std::size_t>(b - 1)].w_out;
    target_out = materialize(out_values[static_cast<std::size_t>(b)]);
    if (b == 0)
      result.network.emb = std::move(cw_out);
    else
      result.network.block_out[static_cast<std::size_t>(b - 1)] = std::move(cw_out);
    if (b == nj - 1)
      result.network.head = std::move(cw_in);
    else
      result.network.block_in[static_cast<std::size_t>(b)] = std::move(cw_in);
  };
  result.network.block_in.resize(static_cast<std::size_t>(nb));
  result.network.block_out.resize(static_cast<std::size_t>(nb));
  result.network.skip_skew.resize(static_cast<std::size_t>(nb));
  result.network.skip_sliced.resize(static_cast<std::size_t>(nb));
  for (Index b = 0; b < nj; ++b) fill_weight(b);

  // Skip slots: skew storage on the standard path (the forward pass keeps
  // the exact dense product; the skew form is the stored representation),
  // zero-column slices on the slicing path.
  for (Index b = 0; b < nb; ++b) {
    ToyBlock& blk = out_net.blocks[static_cast<std::size_t>(b)];
    if (!blk.skip) continue;
    if (plan.slice_path) {
      auto& sliced = skip_sliced[static_cast<std::size_t>(b)];
      if (sliced) {
        blk.skip_matrix = materialize(*sliced);
        result.network.skip_sliced[static_cast<std::size_t>(b)] = std::move(sliced);
      }
    } else {
      const Matrix slot = blk.skip_matrix.size() > 0 ? blk.skip_matrix
                                                     : Matrix(Matrix::Identity(n, n));
      result.network.skip_skew[static_cast<std::size_t>(b)] =
          OrthogonalFactor::from_dense_compressed(slot);
    }
  }

  // Parameter accounting.
  std::int64_t compressed = 0;
  compressed += param_count(result.network.emb.value);
  compressed += param_count(result.network.head.value);
  for (Index b = 0; b < nb; ++b) {
    compressed += param_count(result.network.block_in[static_cast<std::size_t>(b)].value);
    compressed += result.network.block_in[static_cast<std::size_t>(b)].excluded.size();
    compressed += param_count(result.network.block_out[static_cast<std::size_t>(b)].value);
    const ToyBlock& blk = out_net.blocks[static_cast<std::size_t>(b)];
    compressed += blk.b_in.size() + blk.b_out.size();
    if (result.network.skip_skew[static_cast<std::size_t>(b)])
      compressed += result.network.skip_skew[static_cast<std::size_t>(b)]->param_count();
    if (result.network.skip_sliced[static_cast<std::size_t>(b)])
      compressed += param_count(*result.network.skip_sliced[static_cast<std::size_t>(b)]);
  }
  result.report.original_params = dense_params(net);
  result.report.compressed_params = compressed;
  result.report.param_fraction = static_cast<double>(compressed) /
                                 static_cast<double>(result.report.original_params);
  result.report.compression_ratio = 1.0 - result.report.param_fraction;
  result.report.forward_rel_error = heldout_error(net, out_net, heldout);
  return result;
}

// ----- decomposition sizing ---------------------------------------------------

KronShape choose_kron_shape(Index rows, Index cols, Index p, Index q,
                            KronSide side) {
  require(p >= 1 && q >= 1, ErrorCode::ShapeMismatch,
          "choose_kron_shape: p and q must be positive");
  const Index rot = side == KronSide::RotatedRows ? rows : cols;
  const Index other = side == KronSide::RotatedRows ? cols : rows;
  require(rot % q == 0, ErrorCode::NotDivisible,
          "choose_kron_shape: q must divide the rotated dimension");
  KronShape shape;
  shape.spec.r = p;
  if (side == KronSide::RotatedRows) {
    // A_i is q x 1, B_i is (rows/q) x cols.
    shape.spec.m1 = q;
    shape.spec.n1 = 1;
    shape.spec.m2 = rows / q;
    shape.spec.n2 = cols;
  } else {
    // A_i is 1 x q, B_i is rows x (cols/q).
    shape.spec.m1 = 1;
    shape.spec.n1 = q;
    shape.spec.m2 = rows;
    shape.spec.n2 = cols / q;
  }
  require(p <= std::min(shape.spec.m1 * shape.spec.n1,
                        shape.spec.m2 * shape.spec.n2),
          ErrorCode::RankTooLarge, "choose_kron_shape: rank too large");
  shape.dense = static_cast<std::int64_t>(rows) * cols;
  // params = p*q + rows*cols*p/q, exact because q divides the rotated side.
  shape.params = static_cast<std::int64_t>(p) * q +
                 static_cast<std::int64_t>(rot / q) * other * p;
  return shape;
}

std::pair<Index, Index> default_gs_blocks(Index rows, Index cols,
                                          bool embedding_like) {
  if (embedding_like) return {1, 4};
  if (rows == cols) return {4, 2};
  return {4, 8};
}

GsSpec choose_gs_shape(Index rows, Index cols, double c, Index kl, Index kr) {
  require(c > 0.0, ErrorCode::NoFeasibleShape, "choose_gs_shape: target not positive");
  if (rows % kl != 0 || cols % kr != 0)
    fail(ErrorCode::NoFeasibleShape,
         "choose_gs_shape: block counts do not divide the matrix");
  GsSpec best;
  best.kl = kl;
  best.kr = kr;
  best.bl1 = rows / kl;
  best.br2 = cols / kr;
  const double dense = static_cast<double>(rows) * static_cast<double>(cols);
  double best_err = std::numeric_limits<double>::infinity();
  Index best_bl2 = 0;
  for (Index bl2 = 1; bl2 <= rows * cols; ++bl2) {
    if ((kl * bl2) % kr != 0) continue;
    const Index br1 = kl * bl2 / kr;
    const double params = static_cast<double>(kl) * best.bl1 * bl2 +
                          static_cast<double>(kr) * br1 * best.br2;
    const double realized = params / dense;
    const double err = std::abs(realized - c);
    if (err < best_err) {
      best_err = err;
      best_bl2 = bl2;
    }
    if (realized > c + 0.05) break;
  }
  require(best_bl2 > 0 && best_err <= 0.02, ErrorCode::NoFeasibleShape,
          "choose_gs_shape: no integer block shape within 2% of the target");
  best.bl2 = best_bl2;
  best.br1 = kl * best_bl2 / kr;
  return best.resolved();
}

// ----- serialization -----------------------------------------------------------

namespace {

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Gelu: return "gelu";
    case Activation::AttentionStub: return "attention-stub";
  }
  return "relu";
}

Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "gelu") return Activation::Gelu;
  if (s == "attention-stub") return Activation::AttentionStub;
  fail(ErrorCode::BadConfig, "unknown activation " + s);
}

json spectrum_fixes_to_json(const std::vector<SpectrumFix>& log) {
  json arr = json::array();
  for (const SpectrumFix& fix : log) {
    json f;
    if (fix.kind == SpectrumFix::Kind::NegateRow) {
      f["type"] = "negate_row";
      f["row"] = fix.row;
    } else {
      f["type"] = "householder";
      json v = json::array();
      for (Index i = 0; i < fix.v.size(); ++i) v.push_back(fix.v(i));
      f["v"] = v;
    }
    arr.push_back(std::move(f));
  }
  return arr;
}

std::vector<SpectrumFix> spectrum_fixes_from_json(const json& arr) {
  std::vector<SpectrumFix> log;
  for (const auto& f : arr) {
    SpectrumFix fix;
    if (f.at("type").get<std::string>() == "negate_row") {
      fix.kind = SpectrumFix::Kind::NegateRow;
      fix.row = f.at("row").get<Index>();
    } else {
      fix.kind = SpectrumFix::Kind::Householder;
      const json& v = f.at("v");
      fix.v.resize(static_cast<Index>(v.size()));
      for (std::size_t i = 0; i < v.size(); ++i)
        fix.v(static_cast<Index>(i)) = v[i].get<double>();
    }
    log.push_back(std::move(fix));
  }
  return log;
}

}  // namespace

void save_network(const std::filesystem::path& dir, const ToyNetwork& net) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  manifest["type"] = "dense";
  manifest["vocab"] = net.vocab();
  manifest["dim"] = net.dim();
  json blocks = json::array();
  write_matrix(dir / "emb.tensor", net.w_emb);
  write_matrix(dir / "head.tensor", net.w_head);
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const ToyBlock& blk = net.blocks[b];
    const std::string stem = "block" + std::to_string(b);
    json jb;
    jb["hidden"] = blk.hidden();
    jb["activation"] = activation_name(blk.act);
    jb["skip"] = blk.skip;
    jb["has_b_in"] = blk.b_in.size() > 0;
    jb["has_b_out"] = blk.b_out.size() > 0;
    jb["has_skip_matrix"] = blk.skip_matrix.size() > 0;
    write_matrix(dir / (stem + "_in.tensor"), blk.w_in);
    write_matrix(dir / (stem + "_out.tensor"), blk.w_out);
    if (blk.b_in.size() > 0)
      write_tensor(dir / (stem + "_bin.tensor"), tensor_from_vector(blk.b_in));
    if (blk.b_out.size() > 0)
      write_tensor(dir / (stem + "_bout.tensor"), tensor_from_vector(blk.b_out));
    if (blk.skip_matrix.size() > 0)
      write_matrix(dir / (stem + "_skip.tensor"), blk.skip_matrix);
    blocks.push_back(std::move(jb));
  }
  manifest["blocks"] = blocks;
  atomic_write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

ToyNetwork load_network(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorCode::IoError, "cannot open " + (dir / "manifest.json").string());
  json manifest = json::parse(in);
  require(manifest.at("type").get<std::string>() == "dense", ErrorCode::BadConfig,
          "load_network: not a dense network directory");
  ToyNetwork net;
  net.w_emb = read_matrix(dir / "emb.tensor");
  net.w_head = read_matrix(dir / "head.tensor");
  const json& blocks = manifest.at("blocks");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const json& jb = blocks[b];
    const std::string stem = "block" + std::to_string(b);
    ToyBlock blk;
    blk.w_in = read_matrix(dir / (stem + "_in.tensor"));
    blk.w_out = read_matrix(dir / (stem + "_out.tensor"));
    blk.act = activation_from(jb.at("activation").get<std::string>());
    blk.skip = jb.at("skip").get<bool>();
    if (jb.at("has_b_in").get<bool>())
      blk.b_in = tensor_to_vector(read_tensor(dir / (stem + "_bin.tensor")));
    if (jb.at("has_b_out").get<bool>())
      blk.b_out = tensor_to_vector(read_tensor(dir / (stem + "_bout.tensor")));
    if (jb.at("has_skip_matrix").get<bool>())
      blk.skip_matrix = read_matrix(dir / (stem + "_skip.tensor"));
    net.blocks.push_back(std::move(blk));
  }
  return net;
}

void save_compressed(const std::filesystem::path& dir,
                     const CompressedNetwork& cnet) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const ToyNetwork& net = cnet.net;
  json manifest;
  manifest["type"] = "compressed";
  manifest["vocab"] = net.vocab();
  manifest["dim"] = net.dim();
  save_structured(dir / "emb", cnet.emb.value);
  save_structured(dir / "head", cnet.head.value);
  json blocks = json::array();
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const ToyBlock& blk = net.blocks[b];
    const std::string stem = "block" + std::to_string(b);
    json jb;
    jb["hidden"] = blk.hidden();
    jb["activation"] = activation_name(blk.act);
    jb["skip"] = blk.skip;
    jb["has_b_in"] = blk.b_in.size() > 0;
    jb["has_b_out"] = blk.b_out.size() > 0;
    save_structured(dir / (stem + "_in"), cnet.block_in[b].value);
    save_structured(dir / (stem + "_out"), cnet.block_out[b].value);
    jb["values_cols"] = cnet.block_in[b].excluded.cols();
    if (cnet.block_in[b].excluded.size() > 0)
      write_matrix(dir / (stem + "_values.tensor"), cnet.block_in[b].excluded);
    if (blk.b_in.size() > 0)
      write_tensor(dir / (stem + "_bin.tensor"), tensor_from_vector(blk.b_in));
    if (blk.b_out.size() > 0)
      write_tensor(dir / (stem + "_bout.tensor"), tensor_from_vector(blk.b_out));
    if (cnet.skip_skew[b]) {
      jb["skip_storage"] = "skew";
      write_tensor(dir / (stem + "_skip_skew.tensor"),
                   tensor_from_vector(cnet.skip_skew[b]->skew_params()));
      atomic_write_text(dir / (stem + "_skip_fixes.json"),
                        spectrum_fixes_to_json(cnet.skip_skew[b]->fix_log()).dump() +
                            "\n");
    } else if (cnet.skip_sliced[b]) {
      jb["skip_storage"] = "sliced";
      save_structured(dir / (stem + "_skip"), *cnet.skip_sliced[b]);
    } else {
      jb["skip_storage"] = "none";
    }
    blocks.push_back(std::move(jb));
  }
  manifest["blocks"] = blocks;
  atomic_write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

CompressedNetwork load_compressed(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorCode::IoError, "cannot open " + (dir / "manifest.json").string());
  json manifest = json::parse(in);
  require(manifest.at("type").get<std::string>() == "compressed",
          ErrorCode::BadConfig, "load_compressed: not a compressed directory");
  CompressedNetwork cnet;
  cnet.emb.value = load_structured(dir / "emb");
  cnet.head.value = load_structured(dir / "head");
  cnet.net.w_emb = materialize(cnet.emb.value);
  cnet.net.w_head = materialize(cnet.head.value);
  const Index n = manifest.at("dim").get<Index>();
  const json& blocks = manifest.at("blocks");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const json& jb = blocks[b];
    const std::string stem = "block" + std::to_string(b);
    ToyBlock blk;
    blk.act = activation_from(jb.at("activation").get<std::string>());
    blk.skip = jb.at("skip").get<bool>();
    CompressedWeight cw_in{load_structured(dir / (stem + "_in")), {}};
    CompressedWeight cw_out{load_structured(dir / (stem + "_out")), {}};
    Matrix in_mat = materialize(cw_in.value);
    const Index values_cols = jb.at("values_cols").get<Index>();
    if (values_cols > 0) {
      cw_in.excluded = read_matrix(dir / (stem + "_values.tensor"));
      Matrix combined(in_mat.rows(), in_mat.cols() + values_cols);
      combined << in_mat, cw_in.excluded;
      blk.w_in = std::move(combined);
    } else {
      blk.w_in = std::move(in_mat);
    }
    blk.w_out = materialize(cw_out.value);
    if (jb.at("has_b_in").get<bool>())
      blk.b_in = tensor_to_vector(read_tensor(dir / (stem + "_bin.tensor")));
    if (jb.at("has_b_out").get<bool>())
      blk.b_out = tensor_to_vector(read_tensor(dir / (stem + "_bout.tensor")));
    const std::string storage = jb.at("skip_storage").get<std::string>();
    if (storage == "skew") {
      Vector theta = tensor_to_vector(read_tensor(dir / (stem + "_skip_skew.tensor")));
      std::ifstream fin(dir / (stem + "_skip_fixes.json"));
      json fixes = json::parse(fin);
      OrthogonalFactor f =
          OrthogonalFactor::from_skew(std::move(theta), n,
                                      spectrum_fixes_from_json(fixes));
      blk.skip_matrix = f.dense();
      cnet.skip_skew.push_back(std::move(f));
      cnet.skip_sliced.push_back(std::nullopt);
    } else if (storage == "sliced") {
      StructuredValue sv = load_structured(dir / (stem + "_skip"));
      blk.skip_matrix = materialize(sv);
      cnet.skip_skew.push_back(std::nullopt);
      cnet.skip_sliced.push_back(std::move(sv));
    } else {
      cnet.skip_skew.push_back(std::nullopt);
      cnet.skip_sliced.push_back(std::nullopt);
    }
    cnet.block_in.push_back(std::move(cw_in));
    cnet.block_out.push_back(std::move(cw_out));
    cnet.net.blocks.push_back(std::move(blk));
  }
  return cnet;
}

ToyNetwork load_any_network(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorCode::IoError, "cannot open " + (dir / "manifest.json").string());
  json manifest = json::parse(in);
  if (manifest.at("type").get<std::string>() == "dense") return load_network(dir);
  return load_compressed(dir).net;
}

}  // namespace pkit
