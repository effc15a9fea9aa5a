#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "nowcast/field.hpp"

namespace nowcast {

inline constexpr std::array<double, 5> kDefaultThresholds = {4, 8, 16, 32, 64};
inline constexpr std::array<int, 2> kDefaultPools = {1, 4};

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

/// A score together with whether its denominator vanished (score is then 0).
struct Score {
  double value = 0.0;
  bool degenerate = false;
};

/// Threshold both fields at t (≥), max-pool both masks by `pool`, count cells.
ConfusionCounts confusion(const Grid& forecast, const Grid& observed, double threshold, int pool);

Score csi(const ConfusionCounts& c);
Score hss(const ConfusionCounts& c);

struct SkillCell {
  int lead = 0;  // 1-based lead index
  double threshold = 0;
  int pool = 1;
  ConfusionCounts counts;
  Score csi;
  Score hss;
};

struct SkillAggregate {
  int lead = 0;
  int pool = 1;
  double csi_m = 0;
  double hss_m = 0;
};

/// Skill per (lead, threshold, pool), with counts micro-averaged (summed
/// before the ratio) over every forecast that was added.
class SkillTable {
public:
  SkillTable(std::vector<double> thresholds = {kDefaultThresholds.begin(), kDefaultThresholds.end()},
             std::vector<int> pools = {kDefaultPools.begin(), kDefaultPools.end()},
             std::int64_t step_seconds = 600);

  /// Accumulates counts for one forecast/observation pair at `lead`.
  void add(int lead, const Grid& forecast, const Grid& observed);
  void add_counts(int lead, double threshold, int pool, const ConfusionCounts& c);
  void merge(const SkillTable& other);

  std::vector<int> leads() const;
  const ConfusionCounts& counts(int lead, double threshold, int pool) const;
  std::vector<SkillCell> cells() const;
  std::vector<SkillAggregate> aggregates() const;
  /// Mean CSI over the thresholds at one lead and pool.
  double csi_m(int lead, int pool) const;
  double hss_m(int lead, int pool) const;

  const std::vector<double>& thresholds() const { return thresholds_; }
  const std::vector<int>& pools() const { return pools_; }
  std::int64_t step_seconds() const { return step_seconds_; }

  /// Columns: lead_min,threshold,pool,tp,tn,fp,fn,csi,hss,degenerate where
  /// degenerate is a bitmask (1 = CSI, 2 = HSS).
  void write_csv(std::ostream& os) const;
  /// Columns: lead_min,pool,csi_m,hss_m.
  void write_curves_csv(std::ostream& os) const;

private:
  using Key = std::tuple<int, double, int>;
  std::vector<double> thresholds_;
  std::vector<int> pools_;
  std::int64_t step_seconds_;
  std::map<Key, ConfusionCounts> counts_;
};

/// Forecast frames for one event/window, lead k at index k-1, and the
/// observations they are scored against.
struct ForecastCase {
  std::string event;
  std::vector<PrecipField> forecast;
  std::vector<PrecipField> observed;
};

class AlignmentError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Micro-averaged skill over every case. Forecast and observation must agree
/// in length, size and timestamp at every lead; the first mismatch is
/// reported by event name and lead.
SkillTable evaluate_run(const std::vector<ForecastCase>& cases,
                        std::vector<double> thresholds = {kDefaultThresholds.begin(), kDefaultThresholds.end()},
                        std::vector<int> pools = {kDefaultPools.begin(), kDefaultPools.end()},
                        std::int64_t step_seconds = 600);

}  // namespace nowcast
