#include "stagin/special.hpp"

#include <cmath>
#include <stdexcept>

namespace stagin::special {

namespace {

constexpr double kEps = 1e-16;
constexpr double kTiny = 1e-300;
constexpr int kMaxIter = 500;

// series for P(s,x), valid for x < s+1
double igamma_series(double s, double x) {
  double ap = s;
  double sum = 1.0 / s;
  double del = sum;
  for (int i = 0; i < kMaxIter; ++i) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kEps) break;
  }
  return sum * std::exp(-x + s * std::log(x) - std::lgamma(s));
}

// Lentz continued fraction for Q(s,x), valid for x >= s+1
double igamma_cf(double s, double x) {
  double b = x + 1.0 - s;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= kMaxIter; ++i) {
    double an = -static_cast<double>(i) * (static_cast<double>(i) - s);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return std::exp(-x + s * std::log(x) - std::lgamma(s)) * h;
}

// Lentz continued fraction for the incomplete beta
double betacf(double a, double b, double x) {
  double qab = a + b;
  double qap = a + 1.0;
  double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double igamma_lower_reg(double s, double x) {
  if (s <= 0.0 || x < 0.0) throw std::invalid_argument("igamma: require s > 0 and x >= 0");
  if (x == 0.0) return 0.0;
  if (x < s + 1.0) return igamma_series(s, x);
  return 1.0 - igamma_cf(s, x);
}

double igamma_upper_reg(double s, double x) {
  if (s <= 0.0 || x < 0.0) throw std::invalid_argument("igamma: require s > 0 and x >= 0");
  if (x == 0.0) return 1.0;
  if (x < s + 1.0) return 1.0 - igamma_series(s, x);
  return igamma_cf(s, x);
}

double ibeta_reg(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw std::invalid_argument("ibeta: require a,b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log(1.0 - x);
  double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double chi2_sf(double stat, int dof) {
  if (dof <= 0) throw std::invalid_argument("chi2_sf: dof must be positive");
  if (stat < 0.0) return 1.0;
  return igamma_upper_reg(0.5 * dof, 0.5 * stat);
}

double student_t_sf(double t, double dof) {
  if (dof <= 0.0) throw std::invalid_argument("student_t_sf: dof must be positive");
  if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
  double x = dof / (dof + t * t);
  double p = 0.5 * ibeta_reg(0.5 * dof, 0.5, x);
  return t >= 0.0 ? p : 1.0 - p;
}

}  // namespace stagin::special
