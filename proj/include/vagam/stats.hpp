#pragma once

#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>

namespace vagam {

/// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Standard normal quantile.
inline double normal_quantile(double q) {
    return std::sqrt(2.0) * boost::math::erf_inv(2.0 * q - 1.0);
}

/// Upper tail probability P(chi^2_dof > w).
inline double chi_squared_sf(double w, double dof) {
    if (w <= 0.0) return 1.0;
    return boost::math::gamma_q(0.5 * dof, 0.5 * w);
}

}  // namespace vagam
