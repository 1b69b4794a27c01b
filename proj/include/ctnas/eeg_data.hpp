#pragma once

// Trial ingestion and preprocessing: native directory and CSV readers,
// resampling, per-channel z-scoring fitted on a training split, sliding-window
// slice stacking, subject-aware splits and a synthetic EEG generator.
//
// Native trial directory:
//   meta.json  {"format": "ctnas-trials", "version": 1,
//               "channels": ["C3", "Cz", ...], "points": P, "sample_rate_hz": 250,
//               "classes": K,
//               "trials": [{"file": "trial_00000.f32", "subject": "S1", "label": 2}, ...]}
//   *.f32      C x P little-endian float32 samples, row-major (channel-major).
//
// CSV fixtures: header `subject,label,ch0_t0,ch0_t1,...,ch{C-1}_t{P-1}`, one
// trial per row, samples in the same channel-major order.

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctnas/dataset.hpp"

namespace ctnas {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Trial {
  std::string subject;
  int label = 0;
  std::vector<float> data;  // C x P, channel-major
  bool operator==(const Trial&) const = default;
};

enum class SplitTag { none, train, val };

struct TrialSet {
  std::vector<Trial> trials;
  double sample_rate_hz = 250.0;
  std::vector<std::string> channel_names;
  std::int64_t points = 0;
  int num_classes = 0;
  SplitTag tag = SplitTag::none;

  std::int64_t channels() const { return static_cast<std::int64_t>(channel_names.size()); }
  std::size_t size() const { return trials.size(); }

  bool operator==(const TrialSet&) const = default;

  void validate() const {
    if (!(sample_rate_hz > 0)) throw DataError("sample rate must be positive");
    if (channel_names.empty()) throw DataError("trial set has no channels");
    if (points < 1) throw DataError("trials must have at least one sample point");
    if (num_classes < 1) throw DataError("trial set declares no classes");
    const auto n = static_cast<std::size_t>(channels() * points);
    for (std::size_t i = 0; i < trials.size(); ++i) {
      const auto& t = trials[i];
      if (t.data.size() != n) {
        throw DataError("trial " + std::to_string(i) + " has " + std::to_string(t.data.size()) + " samples, expected " +
                        std::to_string(channels()) + " x " + std::to_string(points));
      }
      if (t.label < 0 || t.label >= num_classes) {
        throw DataError("trial " + std::to_string(i) + " has unknown label " + std::to_string(t.label));
      }
      for (std::size_t k = 0; k < n; ++k)
        if (!std::isfinite(t.data[k])) {
          throw DataError("trial " + std::to_string(i) + " has a non-finite sample at channel " +
                          std::to_string(k / static_cast<std::size_t>(points)) + ", point " +
                          std::to_string(k % static_cast<std::size_t>(points)));
        }
    }
  }

  std::vector<std::string> subjects() const {
    std::vector<std::string> out;
    for (const auto& t : trials)
      if (std::find(out.begin(), out.end(), t.subject) == out.end()) out.push_back(t.subject);
    return out;
  }
};

inline std::vector<std::string> default_channel_names(std::int64_t c) {
  std::vector<std::string> out;
  for (std::int64_t i = 0; i < c; ++i) out.push_back("ch" + std::to_string(i));
  return out;
}

// ---------------------------------------------------------------- readers / writers

namespace detail {

inline std::vector<float> read_f32_le(const std::filesystem::path& p, std::size_t count) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::vector<unsigned char> bytes(count * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size() || in.peek() != std::char_traits<char>::eof()) {
    throw DataError(p.string() + ": expected exactly " + std::to_string(count) + " float32 samples");
  }
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) | static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8 |
                            static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16 |
                            static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24;
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

inline void write_f32_le(const std::filesystem::path& p, const std::vector<float>& v) {
  std::vector<unsigned char> bytes(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline TrialSet read_trial_dir(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw DataError("cannot open " + meta_path.string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  TrialSet set;
  try {
    if (meta.value("format", "") != "ctnas-trials") throw DataError(meta_path.string() + ": not a ctnas-trials directory");
    if (meta.at("channels").is_array()) {
      set.channel_names = meta.at("channels").get<std::vector<std::string>>();
    } else {
      set.channel_names = default_channel_names(meta.at("channels").get<std::int64_t>());
    }
    set.points = meta.at("points").get<std::int64_t>();
    set.sample_rate_hz = meta.at("sample_rate_hz").get<double>();
    set.num_classes = meta.at("classes").get<int>();
    const auto n = static_cast<std::size_t>(set.channels() * set.points);
    const auto& trials = meta.at("trials");
    for (std::size_t i = 0; i < trials.size(); ++i) {
      Trial t;
      t.subject = trials[i].at("subject").get<std::string>();
      t.label = trials[i].at("label").get<int>();
      t.data = detail::read_f32_le(dir / trials[i].at("file").get<std::string>(), n);
      set.trials.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  set.validate();
  return set;
}

inline void write_trial_dir(const TrialSet& set, const std::filesystem::path& dir) {
  set.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json trials = nlohmann::json::array();
  for (std::size_t i = 0; i < set.trials.size(); ++i) {
    std::ostringstream name;
    name << "trial_" << std::setw(5) << std::setfill('0') << i << ".f32";
    detail::write_f32_le(dir / name.str(), set.trials[i].data);
    trials.push_back({{"file", name.str()}, {"subject", set.trials[i].subject}, {"label", set.trials[i].label}});
  }
  const nlohmann::json meta{{"format", "ctnas-trials"},
                            {"version", 1},
                            {"channels", set.channel_names},
                            {"points", set.points},
                            {"sample_rate_hz", set.sample_rate_hz},
                            {"classes", set.num_classes},
                            {"trials", trials}};
  std::ofstream out(dir / "meta.json");
  out << meta.dump(2) << "\n";
}

// `classes` <= 0 infers the class count from the largest label.
inline TrialSet read_trial_csv(const std::filesystem::path& path, double sample_rate_hz = 250.0, int classes = 0) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "subject" || header[1] != "label") {
    throw DataError(path.string() + ": header must start with subject,label");
  }
  std::int64_t max_c = -1, max_p = -1;
  std::vector<std::pair<std::int64_t, std::int64_t>> cols;
  for (std::size_t k = 2; k < header.size(); ++k) {
    long long c = -1, p = -1;
    char tail = 0;
    if (std::sscanf(header[k].c_str(), "ch%lld_t%lld%c", &c, &p, &tail) != 2 || c < 0 || p < 0) {
      throw DataError(path.string() + ": bad column name '" + header[k] + "'");
    }
    cols.emplace_back(c, p);
    max_c = std::max<std::int64_t>(max_c, c);
    max_p = std::max<std::int64_t>(max_p, p);
  }
  TrialSet set;
  set.sample_rate_hz = sample_rate_hz;
  set.channel_names = default_channel_names(max_c + 1);
  set.points = max_p + 1;
  if (static_cast<std::int64_t>(cols.size()) != set.channels() * set.points) {
    throw DataError(path.string() + ": header does not cover a full channel x point grid");
  }
  int max_label = -1;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError(path.string() + ": trial " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " fields, header has " + std::to_string(header.size()));
    }
    Trial t;
    t.subject = cells[0];
    try {
      std::size_t used = 0;
      t.label = std::stoi(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DataError(path.string() + ": trial " + std::to_string(row) + " has unknown label '" + cells[1] + "'");
    }
    t.data.assign(static_cast<std::size_t>(set.channels() * set.points), 0.0f);
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const std::string& cell = cells[k + 2];
      char* end = nullptr;
      const float v = std::strtof(cell.c_str(), &end);
      if (cell.empty() || end != cell.c_str() + cell.size()) {
        throw DataError(path.string() + ": trial " + std::to_string(row) + " has malformed sample '" + cell + "'");
      }
      t.data[static_cast<std::size_t>(cols[k].first * set.points + cols[k].second)] = v;
    }
    max_label = std::max(max_label, t.label);
    set.trials.push_back(std::move(t));
    ++row;
  }
  set.num_classes = classes > 0 ? classes : max_label + 1;
  set.validate();
  return set;
}

inline void write_trial_csv(const TrialSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "subject,label";
  for (std::int64_t c = 0; c < set.channels(); ++c)
    for (std::int64_t p = 0; p < set.points; ++p) out << ",ch" << c << "_t" << p;
  out << "\n";
  out.precision(9);
  for (const auto& t : set.trials) {
    out << t.subject << ',' << t.label;
    for (float v : t.data) out << ',' << v;
    out << "\n";
  }
}

enum class TrialFormat { directory, csv };

inline TrialSet ingest(const std::filesystem::path& path, TrialFormat format, double csv_rate_hz = 250.0) {
  return format == TrialFormat::directory ? read_trial_dir(path) : read_trial_csv(path, csv_rate_hz);
}

inline TrialSet ingest(const std::filesystem::path& path) {
  return ingest(path, std::filesystem::is_directory(path) ? TrialFormat::directory : TrialFormat::csv);
}

// ---------------------------------------------------------------- resampling

namespace detail {

// Blackman-windowed sinc low-pass, unit DC gain; cutoff in cycles per sample.
inline std::vector<double> lowpass_taps(double cutoff, int half) {
  std::vector<double> h(static_cast<std::size_t>(2 * half + 1));
  const double n = static_cast<double>(h.size() - 1);
  double total = 0;
  for (int i = -half; i <= half; ++i) {
    const double x = 2 * cutoff * i;
    const double sinc = i == 0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
    const double k = i + half;
    const double w = 0.42 - 0.5 * std::cos(2 * std::numbers::pi * k / n) + 0.08 * std::cos(4 * std::numbers::pi * k / n);
    h[static_cast<std::size_t>(k)] = sinc * w;
    total += sinc * w;
  }
  for (auto& v : h) v /= total;
  return h;
}

inline std::vector<double> resample_row(const float* x, std::int64_t p, std::int64_t out_p, double ratio,
                                        const std::vector<double>& taps) {
  std::vector<double> src(x, x + p);
  if (!taps.empty()) {
    const int half = static_cast<int>(taps.size() / 2);
    std::vector<double> f(static_cast<std::size_t>(p), 0.0);
    for (std::int64_t i = 0; i < p; ++i) {
      double acc = 0;
      for (int k = -half; k <= half; ++k) {
        const std::int64_t j = std::clamp<std::int64_t>(i + k, 0, p - 1);
        acc += taps[static_cast<std::size_t>(k + half)] * src[static_cast<std::size_t>(j)];
      }
      f[static_cast<std::size_t>(i)] = acc;
    }
    src.swap(f);
  }
  std::vector<double> out(static_cast<std::size_t>(out_p));
  for (std::int64_t i = 0; i < out_p; ++i) {
    const double pos = std::min(static_cast<double>(i) * ratio, static_cast<double>(p - 1));
    const auto j = static_cast<std::int64_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(j);
    const double a = src[static_cast<std::size_t>(j)];
    const double b = src[static_cast<std::size_t>(std::min(j + 1, p - 1))];
    out[static_cast<std::size_t>(i)] = a + frac * (b - a);
  }
  return out;
}

}  // namespace detail

// P' = round(P * target / source). Downsampling low-passes first; the output
// is read off the (filtered) source by linear interpolation.
inline TrialSet resample(const TrialSet& in, double target_hz = 250.0) {
  if (!(in.sample_rate_hz > 0) || !(target_hz > 0)) throw DataError("sampling rates must be positive");
  if (in.sample_rate_hz == target_hz) return in;
  const double ratio = in.sample_rate_hz / target_hz;  // source samples per output sample
  const auto out_p = static_cast<std::int64_t>(std::llround(static_cast<double>(in.points) / ratio));
  if (out_p < 1) throw DataError("resampling leaves no sample points");
  std::vector<double> taps;
  if (ratio > 1) taps = detail::lowpass_taps(0.45 / ratio, static_cast<int>(std::ceil(16 * ratio)));
  TrialSet out = in;
  out.sample_rate_hz = target_hz;
  out.points = out_p;
  for (auto& t : out.trials) {
    std::vector<float> data;
    data.reserve(static_cast<std::size_t>(in.channels() * out_p));
    for (std::int64_t c = 0; c < in.channels(); ++c) {
      const auto row = detail::resample_row(t.data.data() + c * in.points, in.points, out_p, ratio, taps);
      for (double v : row) data.push_back(static_cast<float>(v));
    }
    t.data = std::move(data);
  }
  return out;
}

// ---------------------------------------------------------------- normalization

struct NormStats {
  std::vector<double> mean;
  std::vector<double> scale;  // divisor per channel
  std::vector<std::string> warnings;
};

// Per-channel mean and population standard deviation over every trial and
// sample point of a training (or not yet split) set.
inline NormStats fit_normalizer(const TrialSet& train) {
  if (train.tag == SplitTag::val) throw DataError("normalization statistics must not be fitted on a validation split");
  if (train.trials.empty()) throw DataError("cannot fit normalization on an empty trial set");
  const auto c_count = static_cast<std::size_t>(train.channels());
  const auto p = static_cast<std::size_t>(train.points);
  NormStats s;
  s.mean.assign(c_count, 0.0);
  s.scale.assign(c_count, 1.0);
  for (std::size_t c = 0; c < c_count; ++c) {
    double sum = 0;
    for (const auto& t : train.trials)
      for (std::size_t k = 0; k < p; ++k) sum += t.data[c * p + k];
    const double n = static_cast<double>(train.trials.size() * p);
    const double mean = sum / n;
    double ss = 0;
    for (const auto& t : train.trials)
      for (std::size_t k = 0; k < p; ++k) ss += (t.data[c * p + k] - mean) * (t.data[c * p + k] - mean);
    const double sd = std::sqrt(ss / n);
    s.mean[c] = mean;
    if (sd > 1e-12) {
      s.scale[c] = sd;
    } else {
      s.warnings.push_back("channel " + train.channel_names[c] + " has zero variance; left unscaled");
    }
  }
  return s;
}

inline TrialSet apply_normalizer(const TrialSet& in, const NormStats& s) {
  if (s.mean.size() != static_cast<std::size_t>(in.channels())) throw DataError("normalizer fitted for other channels");
  TrialSet out = in;
  const auto p = static_cast<std::size_t>(in.points);
  for (auto& t : out.trials)
    for (std::size_t c = 0; c < s.mean.size(); ++c)
      for (std::size_t k = 0; k < p; ++k) {
        auto& v = t.data[c * p + k];
        v = static_cast<float>((v - s.mean[c]) / s.scale[c]);
      }
  return out;
}

struct NormalizedSplits {
  TrialSet train;
  TrialSet val;
  NormStats stats;
};

// Fits on `train` only and applies the same statistics to both splits.
inline NormalizedSplits normalize(const TrialSet& train, const TrialSet& val) {
  auto stats = fit_normalizer(train);
  return {apply_normalizer(train, stats), apply_normalizer(val, stats), stats};
}

inline TrialSet normalize(const TrialSet& set, std::vector<std::string>* warnings = nullptr) {
  auto stats = fit_normalizer(set);
  if (warnings) *warnings = stats.warnings;
  return apply_normalizer(set, stats);
}

// ---------------------------------------------------------------- slicing

// B x C x S x W samples: slice s of a trial covers points [s*stride, s*stride + W).
struct SlicedBatch {
  std::vector<float> data;
  std::int64_t trials = 0, channels = 0, slices = 0, window = 0, stride = 0;
  std::vector<int> labels;
  std::vector<std::string> subjects;

  float at(std::int64_t b, std::int64_t c, std::int64_t s, std::int64_t w) const {
    return data[static_cast<std::size_t>(((b * channels + c) * slices + s) * window + w)];
  }
};

inline std::int64_t slice_count(std::int64_t points, std::int64_t window, std::int64_t stride) {
  return (points - window) / stride + 1;
}

inline SlicedBatch slice_stack(const TrialSet& set, std::int64_t window = 400, std::int64_t stride = 50) {
  if (window < 1 || stride < 1) throw DataError("slice window and stride must be positive");
  if (set.points < window) {
    throw DataError("trials have " + std::to_string(set.points) + " points, fewer than the slice window " +
                    std::to_string(window));
  }
  SlicedBatch out;
  out.trials = static_cast<std::int64_t>(set.size());
  out.channels = set.channels();
  out.slices = slice_count(set.points, window, stride);
  out.window = window;
  out.stride = stride;
  out.data.reserve(static_cast<std::size_t>(out.trials * out.channels * out.slices * window));
  for (const auto& t : set.trials) {
    for (std::int64_t c = 0; c < out.channels; ++c)
      for (std::int64_t s = 0; s < out.slices; ++s) {
        const auto* src = t.data.data() + c * set.points + s * stride;
        out.data.insert(out.data.end(), src, src + window);
      }
    out.labels.push_back(t.label);
    out.subjects.push_back(t.subject);
  }
  return out;
}

// Network layout [C, H = window points, W = slices] per sample.
template <typename T>
Dataset<T> to_dataset(const SlicedBatch& b) {
  Dataset<T> d;
  d.sample_shape = {b.channels, b.window, b.slices};
  d.labels = b.labels;
  d.values.resize(static_cast<std::size_t>(b.trials * b.channels * b.window * b.slices));
  std::size_t k = 0;
  for (std::int64_t n = 0; n < b.trials; ++n)
    for (std::int64_t c = 0; c < b.channels; ++c)
      for (std::int64_t h = 0; h < b.window; ++h)
        for (std::int64_t s = 0; s < b.slices; ++s) d.values[k++] = static_cast<T>(b.at(n, c, s, h));
  return d;
}

// ---------------------------------------------------------------- splitting

struct SplitSpec {
  enum class Mode { mixed, subject_specific, leave_ratio } mode = Mode::mixed;
  double train_ratio = 0.5;  // mixed / subject_specific: share of each class kept for training
  std::string subject;       // subject_specific
  double holdout_ratio = 0.2;  // leave_ratio: share of subjects held out for validation
};

struct TrainVal {
  TrialSet train;
  TrialSet val;
};

namespace detail {

inline TrialSet subset(const TrialSet& set, const std::vector<std::size_t>& idx, SplitTag tag) {
  TrialSet out = set;
  out.trials.clear();
  out.tag = tag;
  for (std::size_t i : idx) out.trials.push_back(set.trials[i]);
  return out;
}

inline TrainVal stratified(const TrialSet& set, std::vector<std::size_t> pool, double ratio, std::mt19937_64& rng) {
  if (!(ratio > 0 && ratio < 1)) throw DataError("train ratio must lie in (0, 1)");
  // Per-class quotas by largest remainder so the totals match round(ratio * n).
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(set.num_classes));
  for (std::size_t i : pool) by_class[static_cast<std::size_t>(set.trials[i].label)].push_back(i);
  std::vector<std::size_t> quota(by_class.size());
  std::vector<std::pair<double, std::size_t>> remainder;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    const double exact = ratio * static_cast<double>(by_class[k].size());
    quota[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[k];
    remainder.emplace_back(-(exact - std::floor(exact)), k);
  }
  std::stable_sort(remainder.begin(), remainder.end());
  const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(pool.size())));
  for (std::size_t r = 0; assigned < target && r < remainder.size(); ++r, ++assigned) ++quota[remainder[r].second];
  std::vector<std::size_t> train, val;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& cls = by_class[k];
    std::shuffle(cls.begin(), cls.end(), rng);
    train.insert(train.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(quota[k]));
    val.insert(val.end(), cls.begin() + static_cast<std::ptrdiff_t>(quota[k]), cls.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {subset(set, train, SplitTag::train), subset(set, val, SplitTag::val)};
}

}  // namespace detail

inline TrainVal split(const TrialSet& set, const SplitSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pool;
  switch (spec.mode) {
    case SplitSpec::Mode::mixed:
      pool.resize(set.size());
      std::iota(pool.begin(), pool.end(), 0);
      return detail::stratified(set, pool, spec.train_ratio, rng);
    case SplitSpec::Mode::subject_specific:
      for (std::size_t i = 0; i < set.size(); ++i)
        if (set.trials[i].subject == spec.subject) pool.push_back(i);
      if (pool.empty()) throw DataError("unknown subject '" + spec.subject + "'");
      return detail::stratified(set, pool, spec.train_ratio, rng);
    case SplitSpec::Mode::leave_ratio: {
      if (!(spec.holdout_ratio > 0 && spec.holdout_ratio < 1)) throw DataError("holdout ratio must lie in (0, 1)");
      auto subjects = set.subjects();
      if (subjects.size() < 2) throw DataError("leave-ratio split needs at least two subjects");
      std::sort(subjects.begin(), subjects.end());
      std::shuffle(subjects.begin(), subjects.end(), rng);
      auto held = static_cast<std::size_t>(std::llround(spec.holdout_ratio * static_cast<double>(subjects.size())));
      held = std::clamp<std::size_t>(held, 1, subjects.size() - 1);
      const std::set<std::string> val_subjects(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(held));
      std::vector<std::size_t> train, val;
      for (std::size_t i = 0; i < set.size(); ++i) (val_subjects.count(set.trials[i].subject) ? val : train).push_back(i);
      return {detail::subset(set, train, SplitTag::train), detail::subset(set, val, SplitTag::val)};
    }
  }
  throw DataError("unknown split mode");
}

// ---------------------------------------------------------------- synthetic trials

struct SynthSpec {
  int classes = 4;
  std::int64_t channels = 8;
  std::int64_t points = 750;
  double rate_hz = 250.0;
  int trials_per_class = 50;
  double snr_db = 20.0;
  int subjects = 9;
  std::uint64_t seed = 0;
};

// Class k carries a Hann-windowed (8 + 4k) Hz burst with random onset and phase
// on channels {c : c mod K == k}; every channel gets unit-variance pink noise.
// The burst amplitude makes its mean power over the trial equal 10^(snr/10).
inline TrialSet synth_generate(const SynthSpec& spec) {
  if (!std::isfinite(spec.snr_db)) throw DataError("snr_db must be finite");
  if (spec.classes < 2 || spec.channels < spec.classes || spec.points < 8 || spec.trials_per_class < 1 ||
      spec.subjects < 1 || !(spec.rate_hz > 0)) {
    throw DataError("invalid synthetic data specification");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> white(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TrialSet set;
  set.sample_rate_hz = spec.rate_hz;
  set.channel_names = default_channel_names(spec.channels);
  set.points = spec.points;
  set.num_classes = spec.classes;
  const auto p = static_cast<std::size_t>(spec.points);
  const std::size_t burst = std::max<std::size_t>(8, p * 3 / 5);
  const double target_power = std::pow(10.0, spec.snr_db / 10.0);
  int index = 0;
  for (int n = 0; n < spec.trials_per_class; ++n) {
    for (int k = 0; k < spec.classes; ++k, ++index) {
      Trial t;
      t.subject = "S" + std::to_string(index % spec.subjects + 1);
      t.label = k;
      t.data.resize(static_cast<std::size_t>(spec.channels) * p);
      const double freq = 8.0 + 4.0 * k;
      const std::size_t onset = static_cast<std::size_t>(unit(rng) * static_cast<double>(p - burst));
      const double phase = 2 * std::numbers::pi * unit(rng);
      std::vector<double> wave(p, 0.0);
      double power = 0;
      for (std::size_t i = 0; i < burst; ++i) {
        const double hann = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(i) / (burst - 1));
        const double time = static_cast<double>(onset + i) / spec.rate_hz;
        wave[onset + i] = hann * std::sin(2 * std::numbers::pi * freq * time + phase);
        power += wave[onset + i] * wave[onset + i];
      }
      const double amp = std::sqrt(target_power / (power / static_cast<double>(p)));
      for (std::int64_t c = 0; c < spec.channels; ++c) {
        // Pink noise from white noise via Kellet's economy filter.
        double b0 = 0, b1 = 0, b2 = 0;
        std::vector<double> noise(p);
        double mean = 0;
        for (std::size_t i = 0; i < p; ++i) {
          const double w = white(rng);
          b0 = 0.99765 * b0 + w * 0.0990460;
          b1 = 0.96300 * b1 + w * 0.2965164;
          b2 = 0.57000 * b2 + w * 1.0526913;
          noise[i] = b0 + b1 + b2 + w * 0.1848;
          mean += noise[i];
        }
        mean /= static_cast<double>(p);
        double var = 0;
        for (double v : noise) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / static_cast<double>(p));
        const bool active = c % spec.classes == k;
        for (std::size_t i = 0; i < p; ++i) {
          const double v = (noise[i] - mean) / sd + (active ? amp * wave[i] : 0.0);
          t.data[static_cast<std::size_t>(c) * p + i] = static_cast<float>(v);
        }
      }
      set.trials.push_back(std::move(t));
    }
  }
  set.validate();
  return set;
}

}  // namespace ctnas
