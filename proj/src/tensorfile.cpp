#include "pkit/tensorfile.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace pkit {

namespace {

constexpr char kMagic[8] = {'P', 'K', 'T', 'E', 'N', 'S', 'R', '1'};
constexpr std::uint8_t kDtypeF64 = 0;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  put_u64(out, bits);
}

class Reader {
 public:
  Reader(const std::string& bytes) : bytes_(bytes) {}

  void raw(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size())
      fail(ErrorCode::TruncatedPayload, "tensor file truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint8_t b[4];
    raw(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    std::uint8_t b[8];
    raw(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof())
    fail(ErrorCode::IoError, "read failed for " + path.string());
  return bytes;
}

}  // namespace

Tensor tensor_from_matrix(const MatrixRef& m) {
  Tensor t;
  t.dims = {m.rows(), m.cols()};
  t.data.resize(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) t.data[k++] = m(i, j);
  return t;
}

Matrix tensor_to_matrix(const Tensor& t) {
  require(t.dims.size() == 2, ErrorCode::ShapeMismatch,
          "tensor is not 2-D");
  Matrix m(t.dims[0], t.dims[1]);
  std::size_t k = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = t.data[k++];
  return m;
}

Tensor tensor_from_vector(const VectorRef& v) {
  Tensor t;
  t.dims = {v.size()};
  t.data.assign(v.data(), v.data() + v.size());
  return t;
}

Vector tensor_to_vector(const Tensor& t) {
  require(t.dims.size() == 1, ErrorCode::ShapeMismatch, "tensor is not 1-D");
  Vector v(t.dims[0]);
  for (Index i = 0; i < v.size(); ++i) v(i) = t.data[static_cast<std::size_t>(i)];
  return v;
}

Tensor tensor_from_stack(const std::vector<Matrix>& ms) {
  require(!ms.empty(), ErrorCode::ShapeMismatch, "empty stack");
  const Index rows = ms[0].rows(), cols = ms[0].cols();
  Tensor t;
  t.dims = {static_cast<Index>(ms.size()), rows, cols};
  t.data.reserve(static_cast<std::size_t>(t.size()));
  for (const Matrix& m : ms) {
    require(m.rows() == rows && m.cols() == cols, ErrorCode::ShapeMismatch,
            "stack entries have mixed shapes");
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) t.data.push_back(m(i, j));
  }
  return t;
}

std::vector<Matrix> tensor_to_stack(const Tensor& t) {
  require(t.dims.size() == 3, ErrorCode::ShapeMismatch, "tensor is not 3-D");
  std::vector<Matrix> ms;
  const Index rows = t.dims[1], cols = t.dims[2];
  std::size_t k = 0;
  for (Index s = 0; s < t.dims[0]; ++s) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = t.data[k++];
    ms.push_back(std::move(m));
  }
  return ms;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  require(!t.dims.empty() && t.dims.size() <= 3, ErrorCode::ShapeMismatch,
          "tensor rank must be 1, 2 or 3");
  require(t.size() > 0 &&
              t.data.size() == static_cast<std::size_t>(t.size()),
          ErrorCode::ShapeMismatch, "tensor payload does not match dims");
  std::string out;
  out.reserve(17 + 8 * t.dims.size() + 8 * t.data.size());
  out.append(kMagic, sizeof(kMagic));
  out.push_back(static_cast<char>(kDtypeF64));
  put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (Index d : t.dims) put_u64(out, static_cast<std::uint64_t>(d));
  for (double v : t.data) put_f64(out, v);
  atomic_write_bytes(path, out);
}

Tensor read_tensor(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  Reader r(bytes);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0)
    fail(ErrorCode::BadMagic, "bad magic in " + path.string());
  if (r.u8() != kDtypeF64)
    fail(ErrorCode::UnsupportedDtype, "unsupported dtype in " + path.string());
  const std::uint32_t ndim = r.u32();
  if (ndim < 1 || ndim > 3)
    fail(ErrorCode::ShapeMismatch, "tensor rank must be 1, 2 or 3");
  Tensor t;
  for (std::uint32_t i = 0; i < ndim; ++i)
    t.dims.push_back(static_cast<Index>(r.u64()));
  const Index count = t.size();
  t.data.resize(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) t.data[static_cast<std::size_t>(i)] = r.f64();
  if (!r.at_end())
    fail(ErrorCode::TruncatedPayload,
         "trailing bytes after payload in " + path.string());
  return t;
}

void write_matrix(const std::filesystem::path& path, const MatrixRef& m) {
  write_tensor(path, tensor_from_matrix(m));
}

Matrix read_matrix(const std::filesystem::path& path) {
  return tensor_to_matrix(read_tensor(path));
}

void atomic_write_bytes(const std::filesystem::path& path,
                        const std::string& bytes) {
  namespace fs = std::filesystem;
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) fail(ErrorCode::IoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoError, "rename failed for " + path.string());
}

void atomic_write_text(const std::filesystem::path& path,
                       const std::string& text) {
  atomic_write_bytes(path, text);
}

// ----- job configuration --------------------------------------------------

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, std::initializer_list<const char*> keys,
                    const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : keys)
      if (it.key() == k) known = true;
    if (!known)
      fail(ErrorCode::BadConfig, "unknown key \"" + it.key() + "\" in " + where);
  }
}

Index get_index(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key))
    fail(ErrorCode::BadConfig, std::string(key) + " missing in " + where);
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() <= 0)
    fail(ErrorCode::BadConfig, std::string(key) + " must be a positive integer in " + where);
  return static_cast<Index>(v.get<long long>());
}

RoleStructure parse_role(const json& obj, const std::string& where) {
  if (!obj.is_object())
    fail(ErrorCode::BadConfig, where + " must be an object");
  if (!obj.contains("kind"))
    fail(ErrorCode::BadConfig, "kind missing in " + where);
  RoleStructure rs;
  const std::string kind = obj.at("kind").get<std::string>();
  if (kind == "kron") {
    rs.kind = StructureKind::Kron;
    reject_unknown(obj, {"kind", "r", "q"}, where);
    rs.r = get_index(obj, "r", where);
    rs.q = get_index(obj, "q", where);
  } else if (kind == "gs") {
    rs.kind = StructureKind::Gs;
    reject_unknown(obj, {"kind", "kl", "kr", "bl1", "bl2", "br1", "br2"}, where);
    rs.kl = get_index(obj, "kl", where);
    rs.kr = get_index(obj, "kr", where);
    rs.bl1 = get_index(obj, "bl1", where);
    rs.bl2 = get_index(obj, "bl2", where);
    rs.br1 = get_index(obj, "br1", where);
    rs.br2 = get_index(obj, "br2", where);
    if (rs.kl * rs.bl2 != rs.kr * rs.br1)
      fail(ErrorCode::BadConfig,
           "gs inner dimensions must satisfy kl*bl2 == kr*br1 in " + where);
  } else if (kind == "blockzero") {
    rs.kind = StructureKind::BlockZero;
    reject_unknown(obj, {"kind", "d"}, where);
    rs.d = get_index(obj, "d", where);
  } else if (kind == "none") {
    rs.kind = StructureKind::None;
    reject_unknown(obj, {"kind"}, where);
  } else {
    fail(ErrorCode::BadConfig, "unknown structure kind \"" + kind + "\" in " + where);
  }
  return rs;
}

json role_to_json(const RoleStructure& rs) {
  json j;
  j["kind"] = to_string(rs.kind);
  switch (rs.kind) {
    case StructureKind::Kron:
      j["r"] = rs.r;
      j["q"] = rs.q;
      break;
    case StructureKind::Gs:
      j["kl"] = rs.kl;
      j["kr"] = rs.kr;
      j["bl1"] = rs.bl1;
      j["bl2"] = rs.bl2;
      j["br1"] = rs.br1;
      j["br2"] = rs.br2;
      break;
    case StructureKind::BlockZero:
      j["d"] = rs.d;
      break;
    case StructureKind::None:
      break;
  }
  return j;
}

}  // namespace

JobConfig parse_job_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::BadConfig, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::BadConfig, "config root must be an object");
  reject_unknown(j,
                 {"structures", "frobenius_iters", "weighted_iters", "cg_iters",
                  "lambda_in", "embedding_weighting", "seed"},
                 "config");
  JobConfig cfg;
  if (j.contains("structures")) {
    const json& s = j.at("structures");
    if (!s.is_object()) fail(ErrorCode::BadConfig, "structures must be an object");
    reject_unknown(s, {"in", "out", "embedding", "head"}, "structures");
    if (s.contains("in")) cfg.in = parse_role(s.at("in"), "structures.in");
    if (s.contains("out")) cfg.out = parse_role(s.at("out"), "structures.out");
    if (s.contains("embedding"))
      cfg.embedding = parse_role(s.at("embedding"), "structures.embedding");
    if (s.contains("head")) cfg.head = parse_role(s.at("head"), "structures.head");
  }
  auto get_iters = [&](const char* key, int fallback) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
      fail(ErrorCode::BadConfig, std::string(key) + " must be a nonnegative integer");
    return static_cast<int>(v.get<long long>());
  };
  cfg.frobenius_iters = get_iters("frobenius_iters", cfg.frobenius_iters);
  cfg.weighted_iters = get_iters("weighted_iters", cfg.weighted_iters);
  cfg.cg_iters = get_iters("cg_iters", cfg.cg_iters);
  if (j.contains("lambda_in")) {
    const std::string m = j.at("lambda_in").get<std::string>();
    if (m == "one")
      cfg.lambda_mode = LambdaMode::One;
    else if (m == "balanced")
      cfg.lambda_mode = LambdaMode::Balanced;
    else
      fail(ErrorCode::BadConfig, "lambda_in must be \"one\" or \"balanced\"");
  }
  if (j.contains("embedding_weighting")) {
    const std::string w = j.at("embedding_weighting").get<std::string>();
    if (w == "sqrtD1")
      cfg.emb_weighting = EmbeddingWeighting::SqrtD1;
    else if (w == "logD1")
      cfg.emb_weighting = EmbeddingWeighting::LogD1;
    else if (w == "none")
      cfg.emb_weighting = EmbeddingWeighting::None;
    else
      fail(ErrorCode::BadConfig,
           "embedding_weighting must be \"sqrtD1\", \"logD1\" or \"none\"");
  }
  if (j.contains("seed")) {
    const json& v = j.at("seed");
    if (!v.is_number_unsigned() && !v.is_number_integer())
      fail(ErrorCode::BadConfig, "seed must be an unsigned integer");
    cfg.seed = v.get<std::uint64_t>();
  }
  return cfg;
}

JobConfig load_job_config(const std::filesystem::path& path) {
  return parse_job_config(read_file_bytes(path));
}

std::string job_config_to_json(const JobConfig& cfg) {
  json j;
  j["structures"]["in"] = role_to_json(cfg.in);
  j["structures"]["out"] = role_to_json(cfg.out);
  j["structures"]["embedding"] = role_to_json(cfg.embedding);
  j["structures"]["head"] = role_to_json(cfg.head);
  j["frobenius_iters"] = cfg.frobenius_iters;
  j["weighted_iters"] = cfg.weighted_iters;
  j["cg_iters"] = cfg.cg_iters;
  j["lambda_in"] = to_string(cfg.lambda_mode);
  j["embedding_weighting"] = to_string(cfg.emb_weighting);
  j["seed"] = cfg.seed;
  return j.dump(2) + "\n";
}

const char* to_string(StructureKind k) {
  switch (k) {
    case StructureKind::Kron: return "kron";
    case StructureKind::Gs: return "gs";
    case StructureKind::BlockZero: return "blockzero";
    case StructureKind::None: return "none";
  }
  return "none";
}

const char* to_string(LambdaMode m) {
  return m == LambdaMode::One ? "one" : "balanced";
}

const char* to_string(EmbeddingWeighting w) {
  switch (w) {
    case EmbeddingWeighting::SqrtD1: return "sqrtD1";
    case EmbeddingWeighting::LogD1: return "logD1";
    case EmbeddingWeighting::None: return "none";
  }
  return "none";
}

}  // namespace pkit
