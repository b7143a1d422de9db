#pragma once

#include "cast/trajectory.hpp"

namespace cast::testing {

// Published horizon-wise estimates on the head-and-neck cohort.
inline EffectSeries reference_sp_series() {
  EffectSeries s;
  s.estimand = "sp";
  s.horizons = {12, 24, 36, 48, 60, 72, 84, 96, 108, 120};
  s.effects = {0.099, 0.141, 0.152, 0.178, 0.168, 0.148, 0.156, 0.143, 0.129, 0.100};
  s.ses = {0.049, 0.053, 0.058, 0.072, 0.071, 0.075, 0.077, 0.071, 0.068, 0.063};
  return s;
}

inline EffectSeries reference_rmst_series() {
  EffectSeries s;
  s.estimand = "rmst";
  s.horizons = {12, 24, 36, 48, 60, 72, 84, 96, 108, 120};
  s.effects = {0.44, 1.88, 3.58, 5.80, 7.39, 8.38, 11.08, 13.89, 14.76, 16.11};
  s.ses = {0.26, 0.80, 1.46, 2.31, 2.73, 3.52, 4.76, 5.90, 6.16, 6.92};
  return s;
}

inline EffectSeries polynomial_series(double b0, double b1, double b2, double se = 0.01) {
  EffectSeries s;
  for (int h = 12; h <= 120; h += 12) {
    const double t = h;
    s.horizons.push_back(t);
    s.effects.push_back(b0 + b1 * t + b2 * t * t);
    s.ses.push_back(se);
  }
  return s;
}

}  // namespace cast::testing
