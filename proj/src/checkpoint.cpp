#include "mflow/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mflow {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// little-endian payload codec

void append_le_double(std::string& out, double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

double read_le_double(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

[[noreturn]] void fail(const std::string& what) { throw CheckpointError("checkpoint: " + what); }

// ---------------------------------------------------------------------------
// json codecs for the small value types

json vec_json(const Vec& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Vec vec_from(const json& a) {
  Vec v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v[static_cast<int>(i)] = a[i].get<double>();
  return v;
}

json mat_json(const Mat& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Mat mat_from(const json& a) {
  if (a.empty()) return Mat(0, 0);
  Mat m(a.size(), a[0].size());
  for (size_t r = 0; r < a.size(); ++r) {
    if (a[r].size() != a[0].size()) fail("ragged matrix rows");
    for (size_t c = 0; c < a[r].size(); ++c)
      m(static_cast<int>(r), static_cast<int>(c)) = a[r][c].get<double>();
  }
  return m;
}

json manifold_json(const Manifold& m) {
  return json{{"kind", m.kind == ManifoldKind::Hyperboloid ? "hyperboloid" : "sphere"},
              {"dim", m.dim}};
}

Manifold manifold_from(const json& j) {
  std::string kind = j.at("kind").get<std::string>();
  int dim = j.at("dim").get<int>();
  if (kind == "hyperboloid") return Manifold::hyperboloid(dim);
  if (kind == "sphere") return Manifold::sphere(dim);
  fail("unknown manifold kind '" + kind + "'");
}

json point_json(const ManifoldPoint& p) {
  return json{{"manifold", manifold_json(p.manifold)}, {"x", vec_json(p.x)}};
}

ManifoldPoint point_from(const json& j) {
  ManifoldPoint p{manifold_from(j.at("manifold")), vec_from(j.at("x"))};
  if (p.x.size() != p.manifold.ambient_dim()) fail("point length does not match the manifold");
  return p;
}

const char* mode_name(FieldMode m) {
  return m == FieldMode::TangentDirect ? "tangent-direct" : "ambient-projected";
}

FieldMode mode_from(const std::string& s) {
  if (s == "tangent-direct") return FieldMode::TangentDirect;
  if (s == "ambient-projected") return FieldMode::AmbientProjected;
  fail("unknown field mode '" + s + "'");
}

json grid_json(const TimeGrid& g) {
  return json{{"t_start", g.t_start},
              {"t_end", g.t_end},
              {"steps_per_segment", g.steps_per_segment},
              {"num_charts", g.num_charts}};
}

TimeGrid grid_from(const json& j) {
  TimeGrid g;
  g.t_start = j.at("t_start").get<double>();
  g.t_end = j.at("t_end").get<double>();
  g.steps_per_segment = j.at("steps_per_segment").get<int>();
  g.num_charts = j.at("num_charts").get<int>();
  return g;
}

json policy_json(const ChartPolicy& p) {
  return json{{"kind", p.kind == ChartPolicyKind::FixedK ? "fixed-k" : "adaptive-radius"},
              {"eps_chart", p.eps_chart},
              {"velocity_cap", p.velocity_cap}};
}

ChartPolicy policy_from(const json& j) {
  ChartPolicy p;
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "fixed-k")
    p.kind = ChartPolicyKind::FixedK;
  else if (kind == "adaptive-radius")
    p.kind = ChartPolicyKind::AdaptiveRadius;
  else
    fail("unknown chart policy '" + kind + "'");
  p.eps_chart = j.at("eps_chart").get<double>();
  p.velocity_cap = j.at("velocity_cap").get<bool>();
  return p;
}

// ---------------------------------------------------------------------------
// density specs

json spec_json(const DensitySpec& spec);

json wn_json(const WrappedNormalSpec& s) {
  return json{{"family", "wrapped-normal"},
              {"mean", point_json(s.mean)},
              {"cov", mat_json(s.cov)},
              {"origin", point_json(s.origin)}};
}

WrappedNormalSpec wn_from(const json& j) {
  WrappedNormalSpec s;
  s.mean = point_from(j.at("mean"));
  s.cov = mat_from(j.at("cov"));
  s.origin = point_from(j.at("origin"));
  return s;
}

json spec_json(const DensitySpec& spec) {
  return std::visit(
      [](const auto& s) -> json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, WrappedNormalSpec>) {
          return wn_json(s);
        } else if constexpr (std::is_same_v<T, VmfSpec>) {
          return json{{"family", "vmf"},
                      {"mean_direction", point_json(s.mean_direction)},
                      {"concentration", s.concentration}};
        } else if constexpr (std::is_same_v<T, WrappedNormalMixture>) {
          json comps = json::array();
          for (const auto& c : s.components) comps.push_back(wn_json(c));
          return json{{"family", "wrapped-normal-mixture"},
                      {"weights", s.weights},
                      {"components", comps}};
        } else if constexpr (std::is_same_v<T, ProjectedGaussianMixture>) {
          json means = json::array(), covs = json::array();
          for (const auto& m : s.tangent_means) means.push_back(vec_json(m));
          for (const auto& c : s.covs) covs.push_back(mat_json(c));
          return json{{"family", "projected-gaussian-mixture"},
                      {"manifold", manifold_json(s.manifold)},
                      {"weights", s.weights},
                      {"tangent_means", means},
                      {"covs", covs}};
        } else if constexpr (std::is_same_v<T, TangentCheckerboard>) {
          return json{{"family", "tangent-checkerboard"},
                      {"manifold", manifold_json(s.manifold)},
                      {"anchor", std::vector<double>{s.anchor[0], s.anchor[1]}},
                      {"side", s.side},
                      {"half_extent", s.half_extent}};
        } else {
          static_assert(std::is_same_v<T, SphericalCheckerboard>);
          return json{{"family", "spherical-checkerboard"},
                      {"anchor", std::vector<double>{s.anchor[0], s.anchor[1]}},
                      {"side_phi", s.side_phi},
                      {"side_theta", s.side_theta}};
        }
      },
      spec);
}

DensitySpec spec_from(const json& j) {
  std::string family = j.at("family").get<std::string>();
  if (family == "wrapped-normal") return wn_from(j);
  if (family == "vmf") {
    VmfSpec s;
    s.mean_direction = point_from(j.at("mean_direction"));
    s.concentration = j.at("concentration").get<double>();
    return s;
  }
  if (family == "wrapped-normal-mixture") {
    WrappedNormalMixture s;
    s.weights = j.at("weights").get<std::vector<double>>();
    for (const auto& c : j.at("components")) s.components.push_back(wn_from(c));
    return s;
  }
  if (family == "projected-gaussian-mixture") {
    ProjectedGaussianMixture s;
    s.manifold = manifold_from(j.at("manifold"));
    s.weights = j.at("weights").get<std::vector<double>>();
    for (const auto& m : j.at("tangent_means")) s.tangent_means.push_back(vec_from(m));
    for (const auto& c : j.at("covs")) s.covs.push_back(mat_from(c));
    return s;
  }
  if (family == "tangent-checkerboard") {
    TangentCheckerboard s;
    s.manifold = manifold_from(j.at("manifold"));
    auto a = j.at("anchor").get<std::vector<double>>();
    if (a.size() != 2) fail("checkerboard anchor needs two coordinates");
    s.anchor = Eigen::Vector2d(a[0], a[1]);
    s.side = j.at("side").get<double>();
    s.half_extent = j.at("half_extent").get<double>();
    return s;
  }
  if (family == "spherical-checkerboard") {
    SphericalCheckerboard s;
    auto a = j.at("anchor").get<std::vector<double>>();
    if (a.size() != 2) fail("checkerboard anchor needs two coordinates");
    s.anchor = Eigen::Vector2d(a[0], a[1]);
    s.side_phi = j.at("side_phi").get<double>();
    s.side_theta = j.at("side_theta").get<double>();
    return s;
  }
  fail("unknown density family '" + family + "'");
}

// ---------------------------------------------------------------------------
// file format: canonical header line + '\n' + payload.  The digest is the
// FNV-1a of (header without the digest entry) + '\n' + payload, stored as a
// hex string inside the header.

json field_header(const FieldParams& p) {
  json shapes = json::array();
  for (size_t i = 0; i < p.W.size(); ++i)
    shapes.push_back(std::vector<long>{p.W[i].rows(), p.W[i].cols()});
  return json{{"format", 1},
              {"manifold", manifold_json(p.manifold)},
              {"mode", mode_name(p.mode)},
              {"shapes", shapes},
              {"count", p.param_count()}};
}

std::string payload_bytes(const FieldParams& p) {
  Vec flat = p.flatten();
  std::string bytes;
  bytes.reserve(8 * static_cast<size_t>(flat.size()));
  for (int i = 0; i < flat.size(); ++i) append_le_double(bytes, flat[i]);
  return bytes;
}

void write_checkpoint(const std::string& path, json header, const std::string& payload) {
  std::uint64_t digest = fnv1a(header.dump() + "\n" + payload);
  header["digest"] = hex64(digest);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write '" + path + "'");
  std::string line = header.dump();
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.put('\n');
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.flush();
  if (!out.good()) fail("write to '" + path + "' failed");
}

struct RawCheckpoint {
  json header;
  std::string payload;
};

RawCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) fail("'" + path + "' is empty or unreadable");
  std::string payload(std::istreambuf_iterator<char>(in), {});

  RawCheckpoint raw;
  try {
    raw.header = json::parse(line);
  } catch (const json::exception& e) {
    fail("bad header in '" + path + "': " + e.what());
  }
  if (!raw.header.is_object() || !raw.header.contains("digest"))
    fail("'" + path + "' has no digest");
  std::string stored = raw.header.at("digest").get<std::string>();
  raw.header.erase("digest");
  if (stored != hex64(fnv1a(raw.header.dump() + "\n" + payload)))
    fail("digest mismatch, '" + path + "' is corrupted");
  raw.payload = std::move(payload);
  return raw;
}

FieldParams field_from_raw(const json& header, const std::string& payload) {
  FieldParams p;
  p.manifold = manifold_from(header.at("manifold"));
  p.mode = mode_from(header.at("mode").get<std::string>());
  long count = 0;
  for (const auto& sh : header.at("shapes")) {
    long rows = sh.at(0).get<long>(), cols = sh.at(1).get<long>();
    if (rows < 1 || cols < 1) fail("bad layer shape");
    p.W.push_back(Mat::Zero(rows, cols));
    p.b.push_back(Vec::Zero(rows));
    count += rows * cols + rows;
  }
  if (count != header.at("count").get<long>()) fail("layer shapes disagree with the count");
  if (payload.size() != static_cast<size_t>(8 * count)) fail("payload size mismatch");
  Vec flat(count);
  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
  for (long i = 0; i < count; ++i) flat[i] = read_le_double(bytes + 8 * i);
  p.unflatten(flat);
  return p;
}

}  // namespace

void save_field_checkpoint(const std::string& path, const FieldParams& params) {
  json header = field_header(params);
  header["kind"] = "field-params";
  write_checkpoint(path, std::move(header), payload_bytes(params));
}

FieldParams load_field_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint(path);
  try {
    if (raw.header.at("kind").get<std::string>() != "field-params")
      fail("'" + path + "' is not a parameter checkpoint");
    return field_from_raw(raw.header, raw.payload);
  } catch (const json::exception& e) {
    fail("bad header in '" + path + "': " + e.what());
  }
}

void save_flow_checkpoint(const std::string& path, const FlowModel& model) {
  model.validate();
  json header = field_header(model.theta);
  header["kind"] = "flow-model";
  header["base"] = spec_json(model.base);
  header["grid"] = grid_json(model.grid);
  header["policy"] = policy_json(model.policy);
  write_checkpoint(path, std::move(header), payload_bytes(model.theta));
}

FlowModel load_flow_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint(path);
  FlowModel model;
  try {
    if (raw.header.at("kind").get<std::string>() != "flow-model")
      fail("'" + path + "' is not a flow checkpoint");
    model.theta = field_from_raw(raw.header, raw.payload);
    model.manifold = model.theta.manifold;
    model.base = spec_from(raw.header.at("base"));
    model.grid = grid_from(raw.header.at("grid"));
    model.policy = policy_from(raw.header.at("policy"));
  } catch (const json::exception& e) {
    fail("bad header in '" + path + "': " + e.what());
  }
  try {
    model.validate();
  } catch (const std::exception& e) {
    fail("'" + path + "' holds an inconsistent model: " + e.what());
  }
  return model;
}

std::string density_spec_to_json(const DensitySpec& spec) { return spec_json(spec).dump(); }

DensitySpec density_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(std::string("bad density json: ") + e.what());
  }
  try {
    return spec_from(j);
  } catch (const json::exception& e) {
    fail(std::string("bad density json: ") + e.what());
  }
}

}  // namespace mflow
