#pragma once

// Regularized incomplete gamma/beta functions and the survival functions
// built on them (chi-square, Student t). Series expansion below the
// turnover point, Lentz continued fractions above it.

namespace stagin::special {

// P(s,x) and Q(s,x) = 1 - P(s,x)
double igamma_lower_reg(double s, double x);
double igamma_upper_reg(double s, double x);

// I_x(a,b)
double ibeta_reg(double a, double b, double x);

double chi2_sf(double stat, int dof);

// one-sided upper tail P(T_df > t)
double student_t_sf(double t, double dof);

}  // namespace stagin::special
