#pragma once

// Closed-form structural condition checks: the three Property (S) inequalities
// with the c1/c2 constants, the cone condition with its constant K, and cone
// membership. All inequalities are strict, exactly as stated; margins of zero
// fail.

#include <mfg/common.hpp>
#include <mfg/measures.hpp>
#include <mfg/model.hpp>

#include <string>
#include <utility>
#include <vector>

namespace mfg {

struct ConditionRow {
    std::string name;
    double lhs = 0.0;
    double rhs = 0.0;
    double margin = 0.0;  // lhs - rhs
    bool pass = false;
    bool evaluable = true;  // false when the formula is undefined (e.g. sqrt of a
                            // nonpositive argument); then pass = false as well
};

struct ConditionReport {
    std::vector<ConditionRow> property_S;  // three rows
    ConditionRow cone_condition;
    double cone_K = std::numeric_limits<double>::quiet_NaN();
    double c1 = 0.0, c2 = 0.0;
    std::string notes;
};

inline std::pair<double, double> c1_c2(double L, double lambda_b, int n) {
    if (!(L > 0.0) || !(lambda_b > 0.0) || n < 1)
        throw invalid_argument("c1_c2: require L > 0, lambda_b > 0, n >= 1");
    const double r = L * L / lambda_b;
    const double c1 = r * (1.0 + r);
    const double c2 =
        4.0 * L *
        std::sqrt((n * L / lambda_b) * (1.0 + r) * (1.0 + (L * L * (1.0 + n * L) / lambda_b) * (1.0 + r)));
    return {c1, c2};
}

inline ConditionReport check_property_S(const AssumptionConstants& c) {
    if (!(c.lambda_b > 0.0) || !(c.lambda_v > 0.0))
        throw invalid_argument("check_property_S: require lambda_b, lambda_v > 0");
    ConditionReport rep;
    auto [c1, c2] = c1_c2(c.L, c.lambda_b, c.n);
    rep.c1 = c1;
    rep.c2 = c2;
    const double L2b = c.L * c.L / c.lambda_b;

    ConditionRow r1{"2*lambda_g > L_g", 2.0 * c.lambda_g, c.L_g, 0.0, false, true};
    r1.margin = r1.lhs - r1.rhs;
    r1.pass = r1.margin > 0.0;
    rep.property_S.push_back(r1);

    // Row 2. The l_sigma^m correction divides by (2 lambda_g - L_g); when that
    // is not positive and the term is active, the row is not evaluable.
    ConditionRow r2{"2*lambda_x > L_f0 + mean-field corrections", 2.0 * c.lambda_x, 0.0, 0.0, false, true};
    double sigma_term = 0.0;
    if (c.l_sigma_m != 0.0) {
        if (r1.margin <= 0.0) {
            r2.evaluable = false;
            rep.notes += "row 2: l_sigma^m correction undefined because 2*lambda_g - L_g <= 0; ";
        } else {
            sigma_term = 3.0 * c.n * c.L * c.L * c.l_sigma_m * c.l_sigma_m / r1.margin;
        }
    }
    r2.rhs = c.L_f0 + 2.0 * L2b * c.L_b0 + 2.0 * c1 * c.l_b_m + std::sqrt(2.0) * c2 * c.l_sigma_m +
             sigma_term;
    r2.margin = r2.lhs - r2.rhs;
    r2.pass = r2.evaluable && r2.margin > 0.0;
    if (!r2.evaluable) r2.margin = std::numeric_limits<double>::quiet_NaN();
    rep.property_S.push_back(r2);

    // Row 3. The square root of the row-2 margin appears in the denominator; the
    // row is not evaluable when row 2 fails.
    ConditionRow r3{"2*lambda_v > L^2 L_b2 / lambda_b + ratio", 2.0 * c.lambda_v, 0.0, 0.0, false, true};
    if (!r2.evaluable || r2.margin <= 0.0) {
        r3.evaluable = false;
        r3.rhs = std::numeric_limits<double>::quiet_NaN();
        r3.margin = std::numeric_limits<double>::quiet_NaN();
        rep.notes += "row 3: not evaluable because row 2 fails; ";
    } else {
        r3.rhs = L2b * c.L_b2 + (c.L_f1 + 3.0 * L2b * c.L_b1 + c1 * c.l_b_m + c2 * c.l_sigma_m) /
                                    (2.0 * std::sqrt(r2.margin));
        r3.margin = r3.lhs - r3.rhs;
        r3.pass = r3.margin > 0.0;
    }
    rep.property_S.push_back(r3);
    return rep;
}

// pass <=> 2 lambda_v > (L^2/lambda_b)(L + L_b2 + L L_b2 / (2 lambda_v));
// K = (1 - L^3/(2 lambda_v lambda_b))^{-1} (L^2/lambda_b)(1 + L/(2 lambda_v)),
// undefined (NaN) when 2 lambda_v lambda_b <= L^3.
inline std::pair<bool, double> check_cone_condition(const AssumptionConstants& c) {
    if (!(c.lambda_b > 0.0) || !(c.lambda_v > 0.0))
        throw invalid_argument("check_cone_condition: require lambda_b, lambda_v > 0");
    const double L = c.L, lb = c.lambda_b, lv = c.lambda_v;
    const double L2b = L * L / lb;
    const bool pass = 2.0 * lv > L2b * (L + c.L_b2 + L * c.L_b2 / (2.0 * lv));
    const double denom = 1.0 - L * L * L / (2.0 * lv * lb);
    double K = std::numeric_limits<double>::quiet_NaN();
    if (denom > 0.0) K = (1.0 / denom) * L2b * (1.0 + L / (2.0 * lv));
    if (!(denom > 0.0)) return {false, K};
    return {pass, K};
}

// Fill the cone fields of a report from the same constants.
inline ConditionReport full_condition_report(const AssumptionConstants& c) {
    ConditionReport rep = check_property_S(c);
    auto [pass, K] = check_cone_condition(c);
    const double L2b = c.L * c.L / c.lambda_b;
    rep.cone_condition = ConditionRow{
        "2*lambda_v > (L^2/lambda_b)(L + L_b2 + L L_b2/(2 lambda_v))", 2.0 * c.lambda_v,
        L2b * (c.L + c.L_b2 + c.L * c.L_b2 / (2.0 * c.lambda_v)), 0.0, pass, !std::isnan(K)};
    rep.cone_condition.margin = rep.cone_condition.lhs - rep.cone_condition.rhs;
    rep.cone_K = K;
    return rep;
}

// |p| <= K (1 + |x| + W2(m, delta_0)); boundary inclusive.
inline bool in_cone(const Vec& x, const EmpiricalMeasure& m, const Vec& p, double K) {
    if (!(K > 0.0)) throw invalid_argument("in_cone: require K > 0");
    if (!is_finite(x) || !is_finite(p)) throw invalid_argument("in_cone: non-finite input");
    return p.norm() <= K * (1.0 + x.norm() + w2_to_dirac(m));
}

}  // namespace mfg
