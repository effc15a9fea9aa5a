#include "nowcast/metrics.hpp"

#include <cstdio>
#include <set>
#include <tuple>

namespace nowcast {

ConfusionCounts confusion(const Grid& forecast, const Grid& observed, double threshold, int pool) {
  if (forecast.n() != observed.n()) throw InvalidArgument("confusion: forecast and observation differ in size");
  const Mask f = max_pool(threshold_mask(forecast, threshold), pool);
  const Mask o = max_pool(threshold_mask(observed, threshold), pool);
  ConfusionCounts c;
  for (std::size_t i = 0; i < f.cells.size(); ++i) {
    const bool fc = f.cells[i] != 0, ob = o.cells[i] != 0;
    if (fc && ob)
      ++c.tp;
    else if (fc)
      ++c.fp;
    else if (ob)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

Score csi(const ConfusionCounts& c) {
  const std::uint64_t den = c.tp + c.fn + c.fp;
  if (den == 0) return {0.0, true};
  return {static_cast<double>(c.tp) / static_cast<double>(den), false};
}

Score hss(const ConfusionCounts& c) {
  const double tp = c.tp, tn = c.tn, fp = c.fp, fn = c.fn;
  const double den = (tp + fn) * (tn + fn) + (tp + fp) * (tn + fp);
  if (den == 0) return {0.0, true};
  return {2.0 * (tp * tn - fn * fp) / den, false};
}

SkillTable::SkillTable(std::vector<double> thresholds, std::vector<int> pools, std::int64_t step_seconds)
    : thresholds_(std::move(thresholds)), pools_(std::move(pools)), step_seconds_(step_seconds) {
  if (thresholds_.empty() || pools_.empty()) throw InvalidArgument("SkillTable: need thresholds and pools");
}

void SkillTable::add(int lead, const Grid& forecast, const Grid& observed) {
  for (double t : thresholds_)
    for (int p : pools_) add_counts(lead, t, p, confusion(forecast, observed, t, p));
}

void SkillTable::add_counts(int lead, double threshold, int pool, const ConfusionCounts& c) {
  if (lead < 1) throw InvalidArgument("SkillTable: lead must be >= 1");
  counts_[Key{lead, threshold, pool}] += c;
}

void SkillTable::merge(const SkillTable& other) {
  for (const auto& [k, c] : other.counts_) counts_[k] += c;
}

std::vector<int> SkillTable::leads() const {
  std::set<int> s;
  for (const auto& [k, c] : counts_) s.insert(std::get<0>(k));
  return {s.begin(), s.end()};
}

const ConfusionCounts& SkillTable::counts(int lead, double threshold, int pool) const {
  static const ConfusionCounts empty{};
  auto it = counts_.find(Key{lead, threshold, pool});
  return it == counts_.end() ? empty : it->second;
}

std::vector<SkillCell> SkillTable::cells() const {
  std::vector<SkillCell> out;
  for (int lead : leads())
    for (double t : thresholds_)
      for (int p : pools_) {
        const auto& c = counts(lead, t, p);
        out.push_back(SkillCell{lead, t, p, c, csi(c), hss(c)});
      }
  return out;
}

double SkillTable::csi_m(int lead, int pool) const {
  double s = 0;
  for (double t : thresholds_) s += csi(counts(lead, t, pool)).value;
  return s / static_cast<double>(thresholds_.size());
}

double SkillTable::hss_m(int lead, int pool) const {
  double s = 0;
  for (double t : thresholds_) s += hss(counts(lead, t, pool)).value;
  return s / static_cast<double>(thresholds_.size());
}

std::vector<SkillAggregate> SkillTable::aggregates() const {
  std::vector<SkillAggregate> out;
  for (int lead : leads())
    for (int p : pools_) out.push_back(SkillAggregate{lead, p, csi_m(lead, p), hss_m(lead, p)});
  return out;
}

void SkillTable::write_csv(std::ostream& os) const {
  os << "lead_min,threshold,pool,tp,tn,fp,fn,csi,hss,degenerate\n";
  char buf[256];
  for (const auto& cell : cells()) {
    const int flag = (cell.csi.degenerate ? 1 : 0) | (cell.hss.degenerate ? 2 : 0);
    std::snprintf(buf, sizeof buf, "%lld,%g,%d,%llu,%llu,%llu,%llu,%.6f,%.6f,%d\n",
                  static_cast<long long>(cell.lead * step_seconds_ / 60), cell.threshold, cell.pool,
                  static_cast<unsigned long long>(cell.counts.tp), static_cast<unsigned long long>(cell.counts.tn),
                  static_cast<unsigned long long>(cell.counts.fp), static_cast<unsigned long long>(cell.counts.fn),
                  cell.csi.value, cell.hss.value, flag);
    os << buf;
  }
}

void SkillTable::write_curves_csv(std::ostream& os) const {
  os << "lead_min,pool,csi_m,hss_m\n";
  char buf[128];
  for (const auto& a : aggregates()) {
    std::snprintf(buf, sizeof buf, "%lld,%d,%.6f,%.6f\n", static_cast<long long>(a.lead * step_seconds_ / 60), a.pool,
                  a.csi_m, a.hss_m);
    os << buf;
  }
}

SkillTable evaluate_run(const std::vector<ForecastCase>& cases, std::vector<double> thresholds, std::vector<int> pools,
                        std::int64_t step_seconds) {
  SkillTable table(std::move(thresholds), std::move(pools), step_seconds);
  for (const auto& fc : cases) {
    if (fc.forecast.size() != fc.observed.size())
      throw AlignmentError("event " + fc.event + ": " + std::to_string(fc.forecast.size()) + " forecast leads but " +
                           std::to_string(fc.observed.size()) + " observations");
    for (std::size_t k = 0; k < fc.forecast.size(); ++k) {
      const auto& f = fc.forecast[k];
      const auto& o = fc.observed[k];
      if (f.n() != o.n() || f.timestamp != o.timestamp)
        throw AlignmentError("event " + fc.event + " lead " + std::to_string(k + 1) +
                             ": forecast and observation are not aligned");
      table.add(static_cast<int>(k) + 1, f.values, o.values);
    }
  }
  return table;
}

}  // namespace nowcast
