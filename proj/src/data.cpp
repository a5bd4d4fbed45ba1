#include "fedsim/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/seed.hpp"

namespace fedsim {

namespace {

DataError invalid(const std::string& what) {
  return DataError(DataError::Code::kInvalidArgument, what);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(trim(line.substr(start)));
      return cells;
    }
    cells.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

bool parse_double(std::string_view cell, double& out) {
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  if (cell.empty()) return false;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), out);
  return ec == std::errc() && ptr == cell.data() + cell.size() && std::isfinite(out);
}

std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return v;
}

// Rows of `input` grouped by label, each group in input order.
std::vector<std::vector<std::size_t>> group_by_label(const Shard& input) {
  std::vector<std::vector<std::size_t>> groups(input.data->classes);
  for (std::size_t r : input.indices) {
    groups[static_cast<std::size_t>(input.data->labels[r])].push_back(r);
  }
  return groups;
}

// Splits `total` into integer counts proportional to `weights` (which sum to
// a positive value). Leftover units go to the largest fractional parts, lowest
// index first on ties.
std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size());
  std::vector<std::pair<double, std::size_t>> fractions;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    counts[i] = std::min(total, static_cast<std::size_t>(std::floor(exact)));
    assigned += counts[i];
    fractions.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(fractions.begin(), fractions.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t j = 0; assigned < total; j = (j + 1) % fractions.size()) {
    ++counts[fractions[j].second];
    ++assigned;
  }
  // Floors can overshoot only through rounding of huge totals; trim from the back.
  for (std::size_t i = counts.size(); assigned > total && i-- > 0;) {
    const std::size_t take = std::min(counts[i], assigned - total);
    counts[i] -= take;
    assigned -= take;
  }
  return counts;
}

void require_data(const Shard& input) {
  if (!input.data) throw invalid("shard has no dataset");
}

}  // namespace

// ---------------------------------------------------------------------------

Shard Shard::all(std::shared_ptr<const Dataset> data) {
  Shard s{std::move(data), {}};
  s.indices.resize(s.data->rows());
  std::iota(s.indices.begin(), s.indices.end(), std::size_t{0});
  return s;
}

void Shard::validate() const {
  require_data(*this);
  std::vector<bool> seen(data->rows(), false);
  for (std::size_t r : indices) {
    if (r >= data->rows()) throw invalid("shard index " + std::to_string(r) + " out of range");
    if (seen[r]) throw invalid("shard index " + std::to_string(r) + " repeated");
    seen[r] = true;
  }
}

std::string PartitionScheme::tag() const {
  switch (kind) {
    case Kind::kIid: return "iid";
    case Kind::kLabelShard: return "label_shard(" + std::to_string(shards_per_part) + ")";
    case Kind::kDirichlet: {
      std::ostringstream os;
      os << "dirichlet(" << alpha << ")";
      return os.str();
    }
  }
  return "";
}

std::uint64_t PartitionPlan::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  auto mix_shard = [&](const Shard& s) {
    mix(s.indices.size());
    for (std::size_t r : s.indices) mix(r);
  };
  mix_shard(public_shard);
  for (const auto& s : private_shards) mix_shard(s);
  return h;
}

// ---------------------------------------------------------------------------
// CSV

Dataset load_csv(const std::filesystem::path& path, std::string_view label_column) {
  std::ifstream in(path);
  if (!in) {
    throw DataError(DataError::Code::kMissingFile, "cannot open '" + path.string() + "'");
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError(DataError::Code::kEmptyBody, "'" + path.string() + "' has no header row");
  }
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  std::vector<std::string> header;
  for (auto cell : split_commas(line)) header.emplace_back(cell);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) {
    throw DataError(DataError::Code::kMissingColumn,
                    "'" + path.string() + "' has no column named '" + std::string(label_column) +
                        "'");
  }
  const auto label_pos = static_cast<std::size_t>(label_it - header.begin());

  Dataset ds;
  ds.dim = header.size() - 1;
  std::vector<std::string> raw_labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(line);
    const std::size_t data_row = raw_labels.size() + 1;
    if (cells.size() != header.size()) {
      throw DataError(DataError::Code::kRaggedRow,
                      path.string() + ": row " + std::to_string(data_row) + " (line " +
                          std::to_string(line_no) + ") has " + std::to_string(cells.size()) +
                          " cells, header has " + std::to_string(header.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == label_pos) continue;
      double v = 0.0;
      if (!parse_double(cells[c], v)) {
        throw DataError(DataError::Code::kNonNumeric,
                        path.string() + ": row " + std::to_string(data_row) + " (line " +
                            std::to_string(line_no) + "), column '" + header[c] +
                            "': non-numeric value '" + std::string(cells[c]) + "'");
      }
      ds.features.push_back(v);
    }
    raw_labels.emplace_back(cells[label_pos]);
  }
  if (raw_labels.empty()) {
    throw DataError(DataError::Code::kEmptyBody, "'" + path.string() + "' has no data rows");
  }
  if (ds.dim == 0) {
    throw DataError(DataError::Code::kMissingColumn,
                    "'" + path.string() + "' has no feature columns besides the label");
  }

  std::vector<std::string> distinct(raw_labels);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  const bool all_numeric = std::all_of(distinct.begin(), distinct.end(), [&](const auto& s) {
    double v;
    return parse_double(s, v);
  });
  if (all_numeric) {
    std::sort(distinct.begin(), distinct.end(), [](const std::string& a, const std::string& b) {
      double x = 0.0, y = 0.0;
      parse_double(a, x);
      parse_double(b, y);
      return x < y || (x == y && a < b);
    });
  }
  std::map<std::string, int, std::less<>> index;
  for (std::size_t i = 0; i < distinct.size(); ++i) index[distinct[i]] = static_cast<int>(i);
  ds.classes = std::max<std::size_t>(distinct.size(), 1);
  ds.labels.reserve(raw_labels.size());
  for (const auto& l : raw_labels) ds.labels.push_back(index.find(l)->second);
  return ds;
}

void write_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError(DataError::Code::kMissingFile, "cannot write '" + path.string() + "'");
  }
  for (std::size_t j = 0; j < data.dim; ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < data.rows(); ++i) {
    for (double v : data.row(i)) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), v);
      out.write(buf, res.ptr - buf);
      out << ',';
    }
    out << data.labels[i] << '\n';
  }
  if (!out) {
    throw DataError(DataError::Code::kMissingFile, "write to '" + path.string() + "' failed");
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

std::vector<double> blob_direction(std::size_t cls, std::size_t dim) {
  std::vector<double> u(dim, 0.0);
  if (cls < dim) {
    u[cls] = 1.0;
  } else if (cls < 2 * dim) {
    u[cls - dim] = -1.0;
  } else {
    Rng rng(derive_seed(0xB10B5ULL, {cls}));
    std::normal_distribution<double> normal;
    double norm = 0.0;
    while (norm == 0.0) {
      for (auto& v : u) v = normal(rng);
      norm = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
    }
    for (auto& v : u) v /= norm;
  }
  return u;
}

Dataset gen_blobs(std::size_t classes, std::size_t per_class, std::size_t dim,
                  double separation, double noise_sd, std::uint64_t seed) {
  if (classes < 2) throw invalid("blobs need classes >= 2");
  if (per_class < 1) throw invalid("blobs need per_class >= 1");
  if (dim < 1) throw invalid("blobs need d >= 1");
  if (!(noise_sd >= 0.0)) throw invalid("blobs need noise_sd >= 0");
  Dataset ds;
  ds.dim = dim;
  ds.classes = classes;
  ds.features.reserve(classes * per_class * dim);
  ds.labels.reserve(classes * per_class);
  Rng rng(seed);
  std::normal_distribution<double> normal;
  for (std::size_t c = 0; c < classes; ++c) {
    const auto u = blob_direction(c, dim);
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        ds.features.push_back(separation * u[j] + noise_sd * normal(rng));
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Partitioning

PartitionPlan split_public_private(std::shared_ptr<const Dataset> data, std::size_t clients,
                                   const PartitionScheme& scheme, std::uint64_t seed) {
  if (!data) throw invalid("no dataset to split");
  if (clients < 1) throw invalid("need at least one client");
  const std::size_t n = data->rows();
  if (clients + 1 > n) {
    throw invalid("cannot split " + std::to_string(n) + " rows into " +
                  std::to_string(clients + 1) + " shards");
  }
  const Shard everything = Shard::all(data);
  const std::size_t public_size = n / (clients + 1);

  auto groups = group_by_label(everything);
  std::vector<double> weights(groups.size());
  for (std::size_t c = 0; c < groups.size(); ++c) weights[c] = static_cast<double>(groups[c].size());
  const auto quotas = largest_remainder(public_size, weights);

  Rng rng(derive_seed(seed, {1}));
  std::vector<bool> is_public(n, false);
  PartitionPlan plan;
  plan.scheme = scheme;
  plan.seed = seed;
  plan.public_shard.data = data;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    std::shuffle(groups[c].begin(), groups[c].end(), rng);
    for (std::size_t i = 0; i < quotas[c]; ++i) {
      plan.public_shard.indices.push_back(groups[c][i]);
      is_public[groups[c][i]] = true;
    }
  }
  std::sort(plan.public_shard.indices.begin(), plan.public_shard.indices.end());

  Shard remainder{data, {}};
  for (std::size_t r = 0; r < n; ++r) {
    if (!is_public[r]) remainder.indices.push_back(r);
  }
  plan.private_shards = partition(remainder, clients, scheme, derive_seed(seed, {2}));
  for (std::size_t k = 0; k < plan.private_shards.size(); ++k) {
    if (plan.private_shards[k].empty()) {
      throw invalid("partition left client " + std::to_string(k) + " without data");
    }
  }
  return plan;
}

std::vector<Shard> partition(const Shard& input, std::size_t parts, const PartitionScheme& scheme,
                             std::uint64_t seed) {
  switch (scheme.kind) {
    case PartitionScheme::Kind::kIid: return partition_iid(input, parts, seed);
    case PartitionScheme::Kind::kLabelShard:
      return partition_label_shards(input, parts, scheme.shards_per_part, seed);
    case PartitionScheme::Kind::kDirichlet:
      return partition_dirichlet(input, parts, scheme.alpha, seed);
  }
  throw invalid("unknown partition scheme");
}

std::vector<Shard> partition_iid(const Shard& input, std::size_t parts, std::uint64_t seed) {
  require_data(input);
  if (parts < 1) throw invalid("need at least one part");
  if (input.size() < parts) {
    throw invalid("cannot cut " + std::to_string(input.size()) + " rows into " +
                  std::to_string(parts) + " non-empty parts");
  }
  std::vector<std::size_t> order = input.indices;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Shard> out;
  const std::size_t base = order.size() / parts;
  const std::size_t extra = order.size() % parts;
  std::size_t start = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t len = base + (p < extra ? 1 : 0);
    out.push_back({input.data, sorted({order.begin() + start, order.begin() + start + len})});
    start += len;
  }
  return out;
}

std::vector<Shard> partition_label_shards(const Shard& input, std::size_t parts,
                                          std::size_t shards_per_part, std::uint64_t seed) {
  require_data(input);
  if (parts < 1) throw invalid("need at least one part");
  if (shards_per_part < 1) throw invalid("shards_per_part must be >= 1");
  const std::size_t chunks = parts * shards_per_part;
  if (chunks > input.size()) {
    throw invalid(std::to_string(parts) + " parts x " + std::to_string(shards_per_part) +
                  " shards exceeds " + std::to_string(input.size()) + " rows");
  }
  Rng rng(seed);
  std::vector<std::size_t> order;
  for (auto& group : group_by_label(input)) {
    std::shuffle(group.begin(), group.end(), rng);
    order.insert(order.end(), group.begin(), group.end());
  }
  std::vector<std::size_t> chunk_ids(chunks);
  std::iota(chunk_ids.begin(), chunk_ids.end(), std::size_t{0});
  std::shuffle(chunk_ids.begin(), chunk_ids.end(), rng);

  const std::size_t base = order.size() / chunks;
  const std::size_t extra = order.size() % chunks;
  auto chunk_begin = [&](std::size_t c) { return c * base + std::min(c, extra); };

  std::vector<Shard> out;
  for (std::size_t p = 0; p < parts; ++p) {
    Shard s{input.data, {}};
    for (std::size_t j = 0; j < shards_per_part; ++j) {
      const std::size_t c = chunk_ids[p * shards_per_part + j];
      s.indices.insert(s.indices.end(), order.begin() + chunk_begin(c),
                       order.begin() + chunk_begin(c + 1));
    }
    std::sort(s.indices.begin(), s.indices.end());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Shard> partition_dirichlet(const Shard& input, std::size_t parts, double alpha,
                                       std::uint64_t seed) {
  require_data(input);
  if (parts < 1) throw invalid("need at least one part");
  if (!(alpha > 0.0)) throw invalid("dirichlet alpha must be positive");
  Rng rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<std::vector<std::size_t>> assigned(parts);
  for (auto& group : group_by_label(input)) {
    if (group.empty()) continue;
    std::shuffle(group.begin(), group.end(), rng);
    std::vector<double> weights(parts);
    for (auto& w : weights) w = gamma(rng);
    if (std::accumulate(weights.begin(), weights.end(), 0.0) <= 0.0) {
      std::fill(weights.begin(), weights.end(), 1.0);
    }
    const auto counts = largest_remainder(group.size(), weights);
    std::size_t start = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      assigned[p].insert(assigned[p].end(), group.begin() + start,
                         group.begin() + start + counts[p]);
      start += counts[p];
    }
  }
  for (auto& a : assigned) std::sort(a.begin(), a.end());
  // Top-up: every part must be trainable.
  for (std::size_t p = 0; p < parts; ++p) {
    if (!assigned[p].empty()) continue;
    std::size_t largest = 0;
    for (std::size_t q = 1; q < parts; ++q) {
      if (assigned[q].size() > assigned[largest].size()) largest = q;
    }
    if (assigned[largest].size() < 2) break;
    assigned[p].push_back(assigned[largest].back());
    assigned[largest].pop_back();
  }
  std::vector<Shard> out;
  for (auto& a : assigned) out.push_back({input.data, std::move(a)});
  return out;
}

Shard sample_kshot(const Shard& input, std::size_t k, std::uint64_t seed) {
  require_data(input);
  if (input.empty()) throw invalid("cannot sample k-shot rows from an empty shard");
  if (k < 1) throw invalid("k must be >= 1");
  Shard out{input.data, {}};
  auto groups = group_by_label(input);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    auto& g = groups[c];
    if (g.size() > k) {
      Rng rng(derive_seed(seed, {c}));
      std::shuffle(g.begin(), g.end(), rng);
      g.resize(k);
    }
    out.indices.insert(out.indices.end(), g.begin(), g.end());
  }
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

std::vector<std::size_t> label_histogram(const Shard& shard) {
  if (!shard.data) return {};
  std::vector<std::size_t> counts(shard.data->classes, 0);
  for (std::size_t r : shard.indices) ++counts[static_cast<std::size_t>(shard.data->labels[r])];
  return counts;
}

}  // namespace fedsim
