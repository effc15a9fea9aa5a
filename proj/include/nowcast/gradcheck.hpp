#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nowcast {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kEndToEndGradTolerance = 1e-3;

/// Negative controls: corrupt one analytic gradient on purpose.
enum class GradcheckFault { None, Warp };

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int instances = 10;
  int side = 16;
  GradcheckFault fault = GradcheckFault::None;
};

struct GradcheckResult {
  std::string component;
  double max_rel_error = 0.0;
  double tolerance = kGradTolerance;
  int instances = 0;
  std::size_t checked = 0;  // compared gradient entries
  std::size_t skipped = 0;  // entries next to a kink

  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

/// |a - b| / max(|a|, |b|, floor). The floor (1e-3 of the largest analytic
/// gradient entry of the instance) keeps near-zero entries from dominating.
double relative_error(double analytic, double numeric, double floor);

/// Central finite differences against the analytic gradients of warp_vjp,
/// every autodiff op, the tape adapters, both losses, and an end-to-end
/// probe of the evolver loss through a small model.
std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opts);

/// `component=... max_rel_error=... tolerance=... instances=... checked=...
/// skipped=... status=pass|fail`
std::string format_result(const GradcheckResult& r);

}  // namespace nowcast
