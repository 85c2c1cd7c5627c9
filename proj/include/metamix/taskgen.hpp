#pragma once

// Synthetic task families and the phased task stream.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "metamix/error.hpp"
#include "metamix/nnmodel.hpp"
#include "metamix/rng.hpp"

namespace metamix {

enum class Family { Polynomial, Sinusoid, Sawtooth, Blobs };

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::Polynomial: return "polynomial";
    case Family::Sinusoid: return "sinusoid";
    case Family::Sawtooth: return "sawtooth";
    case Family::Blobs: return "blobs";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  if (s == "polynomial" || s == "poly") return Family::Polynomial;
  if (s == "sinusoid" || s == "sin") return Family::Sinusoid;
  if (s == "sawtooth" || s == "saw") return Family::Sawtooth;
  if (s == "blobs") return Family::Blobs;
  throw Error("unknown task family '" + std::string(s) + "'");
}

inline bool is_regression(Family f) { return f != Family::Blobs; }

inline constexpr double kInputLow = -5.0;
inline constexpr double kInputHigh = 5.0;
inline constexpr double kCoeffRange = 5.0;
inline constexpr double kAmplitudeLow = 0.1;
inline constexpr double kAmplitudeHigh = 5.0;
inline constexpr double kBlobSpread = 0.25;

/// One task: a family plus the parameters drawn for it.
class TaskDef {
 public:
  /// y = c0 + c1 x + c2 x^2, each coefficient in [-5, 5].
  static TaskDef polynomial(std::array<double, 3> coeffs) {
    for (double c : coeffs)
      if (!(std::abs(c) <= kCoeffRange)) throw Error("polynomial coefficient outside [-5, 5]");
    TaskDef t(Family::Polynomial);
    t.coeffs_ = coeffs;
    return t;
  }

  /// y = a sin(x - phase), a in [0.1, 5], phase in [0, pi].
  static TaskDef sinusoid(double amplitude, double phase) {
    check_amplitude(amplitude);
    if (!(phase >= 0.0 && phase <= std::numbers::pi)) throw Error("sinusoid phase outside [0, pi]");
    TaskDef t(Family::Sinusoid);
    t.amplitude_ = amplitude;
    t.phase_ = phase;
    return t;
  }

  /// y = -(2a/pi) atan(cot(x pi / period)), a in [0.1, 5], period in (0, pi].
  static TaskDef sawtooth(double amplitude, double period) {
    check_amplitude(amplitude);
    if (!(period > 0.0 && period <= std::numbers::pi)) throw Error("sawtooth period outside (0, pi]");
    TaskDef t(Family::Sawtooth);
    t.amplitude_ = amplitude;
    t.phase_ = period;
    return t;
  }

  /// C-way classification of 2-D points around C means on the unit circle.
  /// Label l sits at angle rotation + 2 pi slot[l] / C.
  static TaskDef blobs(std::size_t classes, double rotation, std::vector<std::size_t> slots = {},
                       double spread = kBlobSpread) {
    if (classes < 2) throw Error("blobs task needs at least 2 classes");
    if (!(spread >= 0.0)) throw Error("blob spread must be non-negative");
    if (slots.empty()) {
      slots.resize(classes);
      for (std::size_t i = 0; i < classes; ++i) slots[i] = i;
    }
    if (slots.size() != classes) throw Error("blob slot permutation has wrong length");
    TaskDef t(Family::Blobs);
    t.phase_ = rotation;
    t.amplitude_ = spread;
    for (std::size_t l = 0; l < classes; ++l) {
      double angle = rotation + 2.0 * std::numbers::pi * static_cast<double>(slots[l]) / static_cast<double>(classes);
      t.means_.push_back({std::cos(angle), std::sin(angle)});
    }
    return t;
  }

  Family family() const { return family_; }
  const std::array<double, 3>& coeffs() const { return coeffs_; }
  double amplitude() const { return amplitude_; }
  double phase() const { return phase_; }
  double period() const { return phase_; }
  double rotation() const { return phase_; }
  double spread() const { return amplitude_; }
  std::size_t classes() const { return means_.size(); }
  const std::vector<std::array<double, 2>>& means() const { return means_; }

  /// Regression target at x.
  double operator()(double x) const {
    switch (family_) {
      case Family::Polynomial: return coeffs_[0] + coeffs_[1] * x + coeffs_[2] * x * x;
      case Family::Sinusoid: return amplitude_ * std::sin(x - phase_);
      case Family::Sawtooth: {
        // atan(cot(u)) = pi/2 - (u mod pi); at u in pi*Z this gives -a, the
        // limit from the right.
        double cycles = x / phase_;
        double frac = cycles - std::floor(cycles);
        return -amplitude_ + 2.0 * amplitude_ * frac;
      }
      case Family::Blobs: break;
    }
    throw Error("blobs tasks have no regression target");
  }

  std::size_t nearest_class(double px, double py) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < means_.size(); ++l) {
      double dx = px - means_[l][0], dy = py - means_[l][1];
      double d = dx * dx + dy * dy;
      if (d < best_d) {
        best_d = d;
        best = l;
      }
    }
    return best;
  }

 private:
  explicit TaskDef(Family f) : family_(f) {}

  static void check_amplitude(double a) {
    if (!(a >= kAmplitudeLow && a <= kAmplitudeHigh)) throw Error("amplitude outside [0.1, 5]");
  }

  Family family_;
  std::array<double, 3> coeffs_{};
  double amplitude_ = 0.0;
  double phase_ = 0.0;
  std::vector<std::array<double, 2>> means_;
};

inline TaskDef sample_polynomial_task(Rng& rng) {
  std::uniform_real_distribution<double> coef(-kCoeffRange, kCoeffRange);
  std::array<double, 3> c{};
  for (double& v : c) v = coef(rng);
  return TaskDef::polynomial(c);
}

inline TaskDef sample_sinusoid_task(Rng& rng) {
  std::uniform_real_distribution<double> amp(kAmplitudeLow, kAmplitudeHigh);
  std::uniform_real_distribution<double> ph(0.0, std::numbers::pi);
  double a = amp(rng);
  return TaskDef::sinusoid(a, ph(rng));
}

inline TaskDef sample_sawtooth_task(Rng& rng) {
  std::uniform_real_distribution<double> amp(kAmplitudeLow, kAmplitudeHigh);
  std::uniform_real_distribution<double> per(0.0, std::numbers::pi);
  double a = amp(rng);
  double p = 0.0;
  while (p <= 0.0) p = per(rng);
  return TaskDef::sawtooth(a, p);
}

/// Random label-to-slot permutation; `rotation` is the phase-level filter.
inline TaskDef sample_blobs_task(Rng& rng, std::size_t classes, double rotation = 0.0) {
  if (classes < 2) throw Error("blobs task needs at least 2 classes");
  std::vector<std::size_t> slots(classes);
  for (std::size_t i = 0; i < classes; ++i) slots[i] = i;
  for (std::size_t i = classes - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(slots[i], slots[pick(rng)]);
  }
  return TaskDef::blobs(classes, rotation, std::move(slots));
}

struct Episode {
  Family family = Family::Sinusoid;
  Dataset support;
  Dataset query;
};

namespace detail {

inline Dataset draw_points(const TaskDef& task, std::size_t count, Rng& rng) {
  Dataset d;
  if (is_regression(task.family())) {
    std::uniform_real_distribution<double> xs(kInputLow, kInputHigh);
    d.x = ad::Tensor(ad::Shape::matrix(count, 1));
    d.y = ad::Tensor(ad::Shape::matrix(count, 1));
    for (std::size_t i = 0; i < count; ++i) {
      d.x.data[i] = xs(rng);
      d.y.data[i] = task(d.x.data[i]);
    }
    return d;
  }
  const std::size_t classes = task.classes();
  std::uniform_int_distribution<std::size_t> label(0, classes - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  d.x = ad::Tensor(ad::Shape::matrix(count, 2));
  std::vector<std::size_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    labels[i] = label(rng);
    const auto& m = task.means()[labels[i]];
    d.x(i, 0) = m[0] + task.spread() * noise(rng);
    d.x(i, 1) = m[1] + task.spread() * noise(rng);
  }
  d.y = one_hot(labels, classes);
  return d;
}

}  // namespace detail

/// Support and query are independent draws from the same task.
inline Episode sample_episode(const TaskDef& task, std::size_t support, std::size_t query, Rng& rng) {
  if (support < 1 || query < 1) throw Error("episodes need at least one support and one query point");
  Episode e;
  e.family = task.family();
  e.support = detail::draw_points(task, support, rng);
  e.query = detail::draw_points(task, query, rng);
  return e;
}

/// Debug dump: columns set, x, y (x0, x1, y for 2-D inputs; y is the label).
inline void write_episode_csv(std::ostream& os, const Episode& e) {
  const bool two_d = e.support.x.shape.cols == 2;
  os << (two_d ? "set,x0,x1,y\n" : "set,x,y\n");
  auto dump = [&](const char* name, const Dataset& d) {
    char buf[128];
    for (std::size_t i = 0; i < d.size(); ++i) {
      double y = 0.0;
      if (d.y.shape.cols == 1) {
        y = d.y.data[i];
      } else {
        for (std::size_t c = 0; c < d.y.shape.cols; ++c)
          if (d.y(i, c) == 1.0) y = static_cast<double>(c);
      }
      if (two_d) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", name, d.x(i, 0), d.x(i, 1), y);
      } else {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g\n", name, d.x.data[i], y);
      }
      os << buf;
    }
  };
  dump("support", e.support);
  dump("query", e.query);
}

// -- stream ------------------------------------------------------------------

/// One phase of the stream. Several families mean each task draws its
/// family uniformly from the list (a stationary mixture).
struct Phase {
  std::vector<Family> families;
  std::size_t duration = 0;
  double rotation = 0.0;  // blobs only
};

struct PhaseSchedule {
  std::vector<Phase> phases;

  std::size_t total() const {
    std::size_t t = 0;
    for (const Phase& p : phases) t += p.duration;
    return t;
  }

  void validate() const {
    if (phases.empty()) throw Error("schedule has no phases");
    for (const Phase& p : phases) {
      if (p.duration < 1) throw Error("phase durations must be >= 1");
      if (p.families.empty()) throw Error("phase without families");
    }
  }

  std::size_t phase_index(std::size_t iteration) const {
    std::size_t start = 0;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      if (iteration < start + phases[i].duration) return i;
      start += phases[i].duration;
    }
    throw Error("iteration " + std::to_string(iteration) + " is past the end of the schedule (" +
                std::to_string(total()) + ")");
  }

  const Phase& phase_at(std::size_t iteration) const { return phases[phase_index(iteration)]; }

  /// Half-open [start, end) of phase i.
  std::pair<std::size_t, std::size_t> bounds(std::size_t i) const {
    std::size_t start = 0;
    for (std::size_t k = 0; k < i; ++k) start += phases[k].duration;
    return {start, start + phases.at(i).duration};
  }

  /// Distinct families in order of first appearance.
  std::vector<Family> families() const {
    std::vector<Family> out;
    for (const Phase& p : phases)
      for (Family f : p.families)
        if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
    return out;
  }

  /// Text form "polynomial:800,sinusoid:600" with "a+b+c:1500" for a mixed
  /// phase and "blobs@0.5:300" for a rotation.
  std::string str() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      if (i) os << ",";
      for (std::size_t k = 0; k < phases[i].families.size(); ++k) {
        if (k) os << "+";
        os << family_name(phases[i].families[k]);
      }
      if (phases[i].rotation != 0.0) os << "@" << phases[i].rotation;
      os << ":" << phases[i].duration;
    }
    return os.str();
  }

  static PhaseSchedule parse(std::string_view text) {
    PhaseSchedule s;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      std::size_t comma = text.find(',', pos);
      std::string_view item = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
      std::size_t colon = item.rfind(':');
      if (colon == std::string_view::npos) throw Error("schedule item '" + std::string(item) + "' lacks ':duration'");
      Phase p;
      std::string_view fams = item.substr(0, colon);
      if (std::size_t at = fams.find('@'); at != std::string_view::npos) {
        p.rotation = std::stod(std::string(fams.substr(at + 1)));
        fams = fams.substr(0, at);
      }
      std::size_t fpos = 0;
      while (fpos <= fams.size()) {
        std::size_t plus = fams.find('+', fpos);
        p.families.push_back(parse_family(fams.substr(fpos, plus == std::string_view::npos ? std::string_view::npos : plus - fpos)));
        if (plus == std::string_view::npos) break;
        fpos = plus + 1;
      }
      std::string dur(item.substr(colon + 1));
      long long d = 0;
      try {
        d = std::stoll(dur);
      } catch (const std::exception&) {
        throw Error("bad phase duration '" + dur + "'");
      }
      if (d < 1) throw Error("phase durations must be >= 1");
      p.duration = static_cast<std::size_t>(d);
      s.phases.push_back(std::move(p));
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
    s.validate();
    return s;
  }
};

/// Family of the phase that contains `iteration`. Mixed phases report their
/// first family.
inline Family stream_family(const PhaseSchedule& schedule, std::size_t iteration) {
  return schedule.phase_at(iteration).families.front();
}

inline TaskDef sample_task(Family family, Rng& rng, std::size_t blob_classes = 5, double rotation = 0.0) {
  switch (family) {
    case Family::Polynomial: return sample_polynomial_task(rng);
    case Family::Sinusoid: return sample_sinusoid_task(rng);
    case Family::Sawtooth: return sample_sawtooth_task(rng);
    case Family::Blobs: return sample_blobs_task(rng, blob_classes, rotation);
  }
  throw Error("unknown family");
}

/// Draws `count` tasks for one meta-iteration from `phase`.
inline std::vector<Episode> sample_meta_batch(const Phase& phase, std::size_t count, std::size_t support,
                                              std::size_t query, Rng& rng, std::size_t blob_classes = 5) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    Family f = phase.families.front();
    if (phase.families.size() > 1) {
      std::uniform_int_distribution<std::size_t> pick(0, phase.families.size() - 1);
      f = phase.families[pick(rng)];
    }
    TaskDef task = sample_task(f, rng, blob_classes, phase.rotation);
    out.push_back(sample_episode(task, support, query, rng));
  }
  return out;
}

}  // namespace metamix
