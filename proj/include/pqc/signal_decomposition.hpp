#pragma once

// Difference signal between forecast and measured solar power, its split
// into a smooth part (low-pass FIR) and a fast part, and storage sizing.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <fmt/format.h>

namespace pqc {

class AlignmentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kFilterTaps = 20;

/// Causal FIR taps w_1..w_20 (index 0 holds w_1), normalized to unit sum.
struct FilterWeights {
    std::array<double, kFilterTaps> w{};

    /// w_k proportional to 1 - 1 / (1 + exp(-steepness * (k - center))).
    static FilterWeights sigmoid(double steepness = 1.2, double center = 0.5) {
        FilterWeights f;
        for (std::size_t i = 0; i < kFilterTaps; ++i) {
            const double k = static_cast<double>(i + 1);
            f.w[i] = 1.0 - 1.0 / (1.0 + std::exp(-steepness * (k - center)));
        }
        f.normalize();
        return f;
    }

    /// w_k proportional to 1 - 1 / (1 + exp(-12k - 0.5)). After normalization
    /// w_1 exceeds 0.99999, so the filter is a one-sample delay.
    static FilterWeights steep_sigmoid() {
        FilterWeights f;
        for (std::size_t i = 0; i < kFilterTaps; ++i) {
            const double k = static_cast<double>(i + 1);
            // 1 - 1/(1+e^-x) == e^-x / (1 + e^-x), evaluated without cancellation.
            const double e = std::exp(-12.0 * k - 0.5);
            f.w[i] = e / (1.0 + e);
        }
        f.normalize();
        return f;
    }

    void normalize() {
        double sum = 0.0;
        for (double x : w) sum += x;
        for (double& x : w) x /= sum;
    }

    void check() const {
        double sum = 0.0;
        for (std::size_t i = 0; i < kFilterTaps; ++i) {
            if (!(w[i] > 0)) throw std::invalid_argument(fmt::format("filter weight {} is not positive", i + 1));
            if (i > 0 && w[i] > w[i - 1]) throw std::invalid_argument("filter weights must be non-increasing");
            sum += w[i];
        }
        if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("filter weights must sum to 1");
    }

    /// |H| at `cycles_per_sample` (0 .. 0.5).
    [[nodiscard]] double gain(double cycles_per_sample) const {
        std::complex<double> h{};
        for (std::size_t i = 0; i < kFilterTaps; ++i)
            h += w[i] * std::polar(1.0, -2.0 * std::numbers::pi * cycles_per_sample * static_cast<double>(i + 1));
        return std::abs(h);
    }

    /// Lowest frequency (cycles per sample) where |H| falls to 1/sqrt(2),
    /// located by bisection after a coarse scan; 0.5 if it never does.
    [[nodiscard]] double cutoff() const {
        const double target = 1.0 / std::sqrt(2.0);
        double lo = 0.0, hi = -1.0;
        for (int i = 1; i <= 5000; ++i) {
            const double f = 0.5 * i / 5000.0;
            if (gain(f) < target) {
                hi = f;
                lo = 0.5 * (i - 1) / 5000.0;
                break;
            }
        }
        if (hi < 0) return 0.5;
        for (int i = 0; i < 60; ++i) {
            const double mid = 0.5 * (lo + hi);
            (gain(mid) < target ? hi : lo) = mid;
        }
        return 0.5 * (lo + hi);
    }
};

/// d(t) = forecast(t+1) - measured(t). The forecast for the step after the
/// last sample is unknown and is held at the last forecast value.
inline std::vector<double> difference_signal(const std::vector<double>& forecast, const std::vector<double>& measured) {
    if (forecast.size() != measured.size())
        throw AlignmentError(fmt::format("forecast has {} samples, measurement {}", forecast.size(), measured.size()));
    std::vector<double> d(measured.size());
    for (std::size_t t = 0; t < measured.size(); ++t) {
        const double next = t + 1 < forecast.size() ? forecast[t + 1] : forecast[t];
        d[t] = next - measured[t];
    }
    return d;
}

/// d_l(t) = sum_k w_k d(t - k). While fewer than 20 past samples exist the
/// available taps are renormalized; the first output repeats d(0).
inline std::vector<double> lowpass(const std::vector<double>& d, const FilterWeights& weights) {
    weights.check();
    std::vector<double> out(d.size());
    for (std::size_t t = 0; t < d.size(); ++t) {
        if (t == 0) {
            out[t] = d[0];
            continue;
        }
        const std::size_t taps = std::min(t, kFilterTaps);
        double acc = 0.0, norm = 0.0;
        for (std::size_t k = 1; k <= taps; ++k) {
            acc += weights.w[k - 1] * d[t - k];
            norm += weights.w[k - 1];
        }
        out[t] = taps == kFilterTaps ? acc : acc / norm;
    }
    return out;
}

struct DifferenceSignal {
    std::vector<double> d;
    std::vector<double> d_l;
    std::vector<double> d_h;
};

inline DifferenceSignal split(const std::vector<double>& d, const FilterWeights& weights = FilterWeights::sigmoid()) {
    DifferenceSignal s;
    s.d = d;
    s.d_l = lowpass(d, weights);
    s.d_h.resize(d.size());
    for (std::size_t t = 0; t < d.size(); ++t) s.d_h[t] = d[t] - s.d_l[t];
    return s;
}

inline constexpr double kMinuteHours = 1.0 / 60.0;

struct SignalEnergy {
    double signed_kwh = 0.0;
    double absolute_kwh = 0.0;
};

/// Rectangle rule: each sample holds for dt_hours.
inline SignalEnergy signal_energy(const std::vector<double>& signal_kw, double dt_hours = kMinuteHours) {
    SignalEnergy e;
    for (double x : signal_kw) {
        e.signed_kwh += x * dt_hours;
        e.absolute_kwh += std::abs(x) * dt_hours;
    }
    return e;
}

struct EssSizing {
    double capacity_kwh = 0.0;
    double max_ramp_kw_per_min = 0.0;
    double signal_energy_kwh = 0.0;
    double absolute_energy_kwh = 0.0;
};

/// Storage that follows `signal_kw` must hold the peak-to-peak swing of its
/// running energy integral. Ramp is the largest sample-to-sample change,
/// expressed per minute.
inline EssSizing ess_capacity_for_signal(const std::vector<double>& signal_kw, double dt_hours = kMinuteHours) {
    if (!(dt_hours > 0)) throw std::invalid_argument("sampling interval must be positive");
    EssSizing s;
    double energy = 0.0, lo = 0.0, hi = 0.0;
    for (std::size_t t = 0; t < signal_kw.size(); ++t) {
        energy += signal_kw[t] * dt_hours;
        lo = std::min(lo, energy);
        hi = std::max(hi, energy);
        if (t > 0)
            s.max_ramp_kw_per_min =
                std::max(s.max_ramp_kw_per_min, std::abs(signal_kw[t] - signal_kw[t - 1]) / (dt_hours * 60.0));
    }
    s.capacity_kwh = hi - lo;
    const auto e = signal_energy(signal_kw, dt_hours);
    s.signal_energy_kwh = e.signed_kwh;
    s.absolute_energy_kwh = e.absolute_kwh;
    return s;
}

}  // namespace pqc
