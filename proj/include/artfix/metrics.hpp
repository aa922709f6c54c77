#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <fftw3.h>

#include "artfix/image.hpp"
#include "json.hpp"

namespace artfix {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

namespace detail {
inline void require_pair(const ImageTensor& a, const ImageTensor& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.values.shape) + " vs " +
                                shape_string(b.values.shape));
  if (a.empty()) throw std::invalid_argument(std::string(what) + ": empty image");
}

inline void require_single(const ImageTensor& a, const char* what) {
  if (a.batch() != 1) throw std::invalid_argument(std::string(what) + ": expects a single image");
}

/// Luma plane Y = 0.299 R + 0.587 G + 0.114 B (grayscale passes through).
inline std::vector<double> luma(const ImageTensor& x) {
  const std::size_t HW = x.plane();
  std::vector<double> y(HW);
  if (x.channels() == 1) {
    std::copy_n(x.values.data.begin(), HW, y.begin());
    return y;
  }
  for (std::size_t i = 0; i < HW; ++i)
    y[i] = 0.299 * x.values[i] + 0.587 * x.values[HW + i] + 0.114 * x.values[2 * HW + i];
  return y;
}
}  // namespace detail

/// Euclidean norm of a - b over masked pixels, all channels.
inline double l2_region(const ImageTensor& a, const ImageTensor& b, const ArtifactMask& m) {
  detail::require_pair(a, b, "l2_region");
  if (!m.matches(a)) throw std::invalid_argument("l2_region: mask does not match image");
  const std::size_t HW = a.plane(), planes = a.batch() * a.channels();
  double s = 0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < HW; ++i)
      if (m[i]) {
        const double d = a.values[p * HW + i] - b.values[p * HW + i];
        s += d * d;
      }
  return std::sqrt(s);
}

inline double mse(const ImageTensor& a, const ImageTensor& b) {
  detail::require_pair(a, b, "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return s / double(a.size());
}

inline double psnr_from_mse(double m, double max_value) {
  if (!(max_value > 0)) throw std::invalid_argument("psnr: max_value must be positive");
  if (m == 0) return kInf;
  return 10.0 * std::log10(max_value * max_value / m);
}

inline double psnr(const ImageTensor& a, const ImageTensor& b, double max_value) {
  return psnr_from_mse(mse(a, b), max_value);
}

/// Signal to reconstruction error ratio in dB; a is the reference. Returns
/// NaN when the reference mean is zero.
inline double sre(const ImageTensor& a, const ImageTensor& b) {
  detail::require_pair(a, b, "sre");
  double mean = 0, err = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mean += a.values[i];
    const double d = a.values[i] - b.values[i];
    err += d * d;
  }
  mean /= double(a.size());
  if (err == 0) return kInf;
  if (mean == 0) return std::numeric_limits<double>::quiet_NaN();
  return 10.0 * std::log10(mean * mean / (err / double(a.size())));
}

/// Mean SSIM over valid positions of an 11x11 Gaussian window (sigma 1.5)
/// on the luma plane; L is the range of the value domain.
inline double ssim(const ImageTensor& a, const ImageTensor& b) {
  detail::require_pair(a, b, "ssim");
  detail::require_single(a, "ssim");
  constexpr int K = 11;
  const std::size_t H = a.height(), W = a.width();
  if (H < K || W < K) throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  std::array<double, K> g{};
  double gs = 0;
  for (int i = 0; i < K; ++i) gs += g[std::size_t(i)] = std::exp(-double((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
  for (double& v : g) v /= gs;

  const auto x = detail::luma(a), y = detail::luma(b);
  const double L = domain_range(a.domain), C1 = (0.01 * L) * (0.01 * L), C2 = (0.03 * L) * (0.03 * L);
  // Separable filtering: rows first, then columns over the valid range.
  const std::size_t OW = W - K + 1, OH = H - K + 1;
  auto hfilter = [&](const std::vector<double>& f) {
    std::vector<double> out(H * OW);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < OW; ++c) {
        double s = 0;
        for (int k = 0; k < K; ++k) s += g[std::size_t(k)] * f[r * W + c + std::size_t(k)];
        out[r * OW + c] = s;
      }
    return out;
  };
  auto vfilter = [&](const std::vector<double>& f) {
    std::vector<double> out(OH * OW);
    for (std::size_t r = 0; r < OH; ++r)
      for (std::size_t c = 0; c < OW; ++c) {
        double s = 0;
        for (int k = 0; k < K; ++k) s += g[std::size_t(k)] * f[(r + std::size_t(k)) * OW + c];
        out[r * OW + c] = s;
      }
    return out;
  };
  std::vector<double> xx(H * W), yy(H * W), xy(H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = vfilter(hfilter(x)), my = vfilter(hfilter(y));
  const auto sxx = vfilter(hfilter(xx)), syy = vfilter(hfilter(yy)), sxy = vfilter(hfilter(xy));
  double total = 0;
  for (std::size_t i = 0; i < OH * OW; ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + C1) * (2 * cxy + C2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
  }
  return total / double(OH * OW);
}

// ------------------------------------------------------------------ FSIM

namespace fsim_detail {

using cplx = std::complex<double>;

/// 2-D DFT through FFTW. forward=false is the unnormalized inverse.
class Fft2 {
 public:
  Fft2(std::size_t rows, std::size_t cols) : buf_(rows * cols) {
    std::lock_guard<std::mutex> lock(planner_mutex());
    auto* p = reinterpret_cast<fftw_complex*>(buf_.data());
    fwd_ = fftw_plan_dft_2d(int(rows), int(cols), p, p, FFTW_FORWARD, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_2d(int(rows), int(cols), p, p, FFTW_BACKWARD, FFTW_ESTIMATE);
    if (!fwd_ || !inv_) throw std::runtime_error("fftw: plan creation failed");
  }
  ~Fft2() {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }
  Fft2(const Fft2&) = delete;
  Fft2& operator=(const Fft2&) = delete;

  std::vector<cplx> run(const std::vector<cplx>& in, bool forward) {
    std::copy(in.begin(), in.end(), buf_.begin());
    fftw_execute(forward ? fwd_ : inv_);
    return buf_;
  }

 private:
  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }
  std::vector<cplx> buf_;
  fftw_plan fwd_ = nullptr, inv_ = nullptr;
};

inline double median(std::vector<double> v) {
  const std::size_t n = v.size(), mid = n / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
  const double hi = v[mid];
  if (n % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(mid));
  return 0.5 * (lo + hi);
}

/// Phase congruency map with 4 scales, 4 orientations and the standard
/// parameter set of the reference implementation.
inline std::vector<double> phase_congruency(const std::vector<double>& im, std::size_t rows, std::size_t cols) {
  constexpr std::size_t nscale = 4;
  constexpr int norient = 4;
  constexpr double minWaveLength = 6, mult = 2, sigmaOnf = 0.55, dThetaOnSigma = 1.2, k = 2, epsilon = 1e-4;
  const double thetaSigma = M_PI / norient / dThetaOnSigma;
  const std::size_t N = rows * cols;

  Fft2 fft(rows, cols);
  std::vector<cplx> spatial(N);
  for (std::size_t i = 0; i < N; ++i) spatial[i] = im[i];
  const std::vector<cplx> imagefft = fft.run(spatial, true);

  // Frequency grids, quadrant shifted so that (0,0) is the DC term.
  std::vector<double> radius(N), sintheta(N), costheta(N), lowpass(N);
  auto axis = [](std::size_t n, std::size_t i) {
    const double half = std::floor(double(n) / 2);
    return (double(i) - half) / (n % 2 ? double(n) - 1 : double(n));
  };
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      // ifftshift: shifted index sr holds the centered coordinate at r.
      const std::size_t sr = (r + rows / 2) % rows, sc = (c + cols / 2) % cols;
      const double y = axis(rows, sr), x = axis(cols, sc);
      const double rad = std::sqrt(x * x + y * y);
      const double th = std::atan2(-y, x);
      const std::size_t i = r * cols + c;
      radius[i] = rad;
      sintheta[i] = std::sin(th);
      costheta[i] = std::cos(th);
      lowpass[i] = 1.0 / (1.0 + std::pow(rad / 0.45, 2 * 15));
    }
  radius[0] = 1;  // avoids log(0); the DC term is zeroed below

  std::vector<std::vector<double>> logGabor(nscale, std::vector<double>(N));
  for (std::size_t s = 0; s < nscale; ++s) {
    const double wavelength = minWaveLength * std::pow(mult, double(s)), fo = 1.0 / wavelength;
    for (std::size_t i = 0; i < N; ++i) {
      const double l = std::log(radius[i] / fo);
      logGabor[s][i] = std::exp(-(l * l) / (2 * std::log(sigmaOnf) * std::log(sigmaOnf))) * lowpass[i];
    }
    logGabor[s][0] = 0;
  }

  std::vector<double> energyAll(N, 0.0), anAll(N, 0.0);
  std::vector<double> sumE(N), sumO(N), sumAn(N), energy(N), spread(N);
  std::vector<std::vector<cplx>> eo(nscale);
  std::vector<std::vector<double>> ifftFilt(nscale, std::vector<double>(N));
  std::vector<cplx> spec(N);
  for (int o = 0; o < norient; ++o) {
    const double angl = o * M_PI / norient, ca = std::cos(angl), sa = std::sin(angl);
    for (std::size_t i = 0; i < N; ++i) {
      const double ds = sintheta[i] * ca - costheta[i] * sa, dc = costheta[i] * ca + sintheta[i] * sa;
      const double dtheta = std::abs(std::atan2(ds, dc));
      spread[i] = std::exp(-(dtheta * dtheta) / (2 * thetaSigma * thetaSigma));
    }
    std::fill(sumE.begin(), sumE.end(), 0.0);
    std::fill(sumO.begin(), sumO.end(), 0.0);
    std::fill(sumAn.begin(), sumAn.end(), 0.0);
    std::fill(energy.begin(), energy.end(), 0.0);
    double EM_n = 0;
    for (std::size_t s = 0; s < nscale; ++s) {
      const auto& lg = logGabor[s];
      // Spatial-domain filter, real part scaled by sqrt(N).
      for (std::size_t i = 0; i < N; ++i) spec[i] = lg[i] * spread[i];
      const auto filt = fft.run(spec, false);
      for (std::size_t i = 0; i < N; ++i) ifftFilt[s][i] = filt[i].real() / double(N) * std::sqrt(double(N));
      if (s == 0)
        for (std::size_t i = 0; i < N; ++i) EM_n += std::norm(spec[i]);

      for (std::size_t i = 0; i < N; ++i) spec[i] *= imagefft[i];
      eo[s] = fft.run(spec, false);
      for (std::size_t i = 0; i < N; ++i) {
        eo[s][i] /= double(N);
        sumAn[i] += std::abs(eo[s][i]);
        sumE[i] += eo[s][i].real();
        sumO[i] += eo[s][i].imag();
      }
    }
    for (std::size_t i = 0; i < N; ++i) {
      const double xEnergy = std::sqrt(sumE[i] * sumE[i] + sumO[i] * sumO[i]) + epsilon;
      const double meanE = sumE[i] / xEnergy, meanO = sumO[i] / xEnergy;
      for (std::size_t s = 0; s < nscale; ++s) {
        const double E = eo[s][i].real(), O = eo[s][i].imag();
        energy[i] += E * meanE + O * meanO - std::abs(E * meanO - O * meanE);
      }
    }

    // Noise threshold from the smallest-scale response statistics.
    std::vector<double> mag2(N);
    for (std::size_t i = 0; i < N; ++i) mag2[i] = std::norm(eo[0][i]);
    const double meanE2n = -median(std::move(mag2)) / std::log(0.5);
    const double noisePower = meanE2n / EM_n;
    double EstSumAn2 = 0, EstSumAiAj = 0;
    for (std::size_t s = 0; s < nscale; ++s)
      for (std::size_t i = 0; i < N; ++i) EstSumAn2 += ifftFilt[s][i] * ifftFilt[s][i];
    for (std::size_t si = 0; si + 1 < nscale; ++si)
      for (std::size_t sj = si + 1; sj < nscale; ++sj)
        for (std::size_t i = 0; i < N; ++i) EstSumAiAj += ifftFilt[si][i] * ifftFilt[sj][i];
    const double EstNoiseEnergy2 = 2 * noisePower * EstSumAn2 + 4 * noisePower * EstSumAiAj;
    const double tau = std::sqrt(EstNoiseEnergy2 / 2);
    const double EstNoiseEnergy = tau * std::sqrt(M_PI / 2);
    const double EstNoiseEnergySigma = std::sqrt((2 - M_PI / 2) * tau * tau);
    const double thresh = (EstNoiseEnergy + k * EstNoiseEnergySigma) / 1.7;

    for (std::size_t i = 0; i < N; ++i) {
      energyAll[i] += std::max(energy[i] - thresh, 0.0);
      anAll[i] += sumAn[i];
    }
  }
  std::vector<double> pc(N);
  for (std::size_t i = 0; i < N; ++i) pc[i] = anAll[i] > 0 ? energyAll[i] / anAll[i] : 0.0;
  return pc;
}

/// conv2(f, k, 'same') with zero padding, k of size kr x kc.
inline std::vector<double> conv2_same(const std::vector<double>& f, std::size_t rows, std::size_t cols,
                                      const std::vector<double>& k, std::size_t kr, std::size_t kc) {
  const long offr = long((kr - 1 + 1) / 2), offc = long((kc - 1 + 1) / 2);
  std::vector<double> out(rows * cols, 0.0);
  for (long r = 0; r < long(rows); ++r)
    for (long c = 0; c < long(cols); ++c) {
      double s = 0;
      for (long u = 0; u < long(kr); ++u)
        for (long v = 0; v < long(kc); ++v) {
          const long fr = r + offr - u, fc = c + offc - v;
          if (fr < 0 || fc < 0 || fr >= long(rows) || fc >= long(cols)) continue;
          s += f[std::size_t(fr) * cols + std::size_t(fc)] * k[std::size_t(u) * kc + std::size_t(v)];
        }
      out[std::size_t(r) * cols + std::size_t(c)] = s;
    }
  return out;
}

}  // namespace fsim_detail

/// FSIM on the luma plane at byte255 scale (T1 = 0.85, T2 = 160).
inline double fsim(const ImageTensor& a, const ImageTensor& b) {
  detail::require_pair(a, b, "fsim");
  detail::require_single(a, "fsim");
  if (a.height() < 32 || a.width() < 32) throw std::invalid_argument("fsim: image must be at least 32x32");
  const auto ya = detail::luma(a.converted(ValueDomain::byte255));
  const auto yb = detail::luma(b.converted(ValueDomain::byte255));
  std::size_t rows = a.height(), cols = a.width();

  const std::size_t F = std::max<std::size_t>(1, std::size_t(std::lround(double(std::min(rows, cols)) / 256.0)));
  std::vector<double> Y1 = ya, Y2 = yb;
  if (F > 1) {
    const std::vector<double> ave(F * F, 1.0 / double(F * F));
    const auto f1 = fsim_detail::conv2_same(ya, rows, cols, ave, F, F);
    const auto f2 = fsim_detail::conv2_same(yb, rows, cols, ave, F, F);
    const std::size_t nr = (rows + F - 1) / F, nc = (cols + F - 1) / F;
    Y1.assign(nr * nc, 0);
    Y2.assign(nr * nc, 0);
    for (std::size_t r = 0; r < nr; ++r)
      for (std::size_t c = 0; c < nc; ++c) {
        Y1[r * nc + c] = f1[r * F * cols + c * F];
        Y2[r * nc + c] = f2[r * F * cols + c * F];
      }
    rows = nr;
    cols = nc;
  }

  const auto pc1 = fsim_detail::phase_congruency(Y1, rows, cols);
  const auto pc2 = fsim_detail::phase_congruency(Y2, rows, cols);

  const std::vector<double> dx{3 / 16.0, 0, -3 / 16.0, 10 / 16.0, 0, -10 / 16.0, 3 / 16.0, 0, -3 / 16.0};
  const std::vector<double> dy{3 / 16.0, 10 / 16.0, 3 / 16.0, 0, 0, 0, -3 / 16.0, -10 / 16.0, -3 / 16.0};
  const auto ix1 = fsim_detail::conv2_same(Y1, rows, cols, dx, 3, 3), iy1 = fsim_detail::conv2_same(Y1, rows, cols, dy, 3, 3);
  const auto ix2 = fsim_detail::conv2_same(Y2, rows, cols, dx, 3, 3), iy2 = fsim_detail::conv2_same(Y2, rows, cols, dy, 3, 3);

  constexpr double T1 = 0.85, T2 = 160;
  double num = 0, den = 0;
  for (std::size_t i = 0; i < rows * cols; ++i) {
    const double g1 = std::sqrt(ix1[i] * ix1[i] + iy1[i] * iy1[i]);
    const double g2 = std::sqrt(ix2[i] * ix2[i] + iy2[i] * iy2[i]);
    const double spc = (2 * pc1[i] * pc2[i] + T1) / (pc1[i] * pc1[i] + pc2[i] * pc2[i] + T1);
    const double sg = (2 * g1 * g2 + T2) / (g1 * g1 + g2 * g2 + T2);
    const double pcm = std::max(pc1[i], pc2[i]);
    num += spc * sg * pcm;
    den += pcm;
  }
  // Featureless pair (no phase congruency anywhere): identical images score
  // 1, anything else is scored by the gradient term alone.
  if (den == 0) {
    double s = 0;
    for (std::size_t i = 0; i < rows * cols; ++i) {
      const double g1 = std::sqrt(ix1[i] * ix1[i] + iy1[i] * iy1[i]);
      const double g2 = std::sqrt(ix2[i] * ix2[i] + iy2[i] * iy2[i]);
      s += (2 * g1 * g2 + T2) / (g1 * g1 + g2 * g2 + T2);
    }
    return s / double(rows * cols);
  }
  return num / den;
}

// ---------------------------------------------------------------- report

struct MetricRow {
  std::string id;
  double l2_region = 0;
  double mse = 0;
  double ssim = 0;
  double psnr = 0;
  double fsim = 0;
  double sre = 0;
  double mse_unit01 = 0;
  double psnr_unit01 = 0;
};

struct Complexity {
  std::size_t params = 0;
  std::uint64_t flops = 0;
  double mean_inference_seconds = 0;
};

/// All metrics for one (clean, restored) pair. MSE and PSNR are on the
/// byte255 scale, with the unit01 values alongside.
inline MetricRow evaluate_pair(std::string id, const ImageTensor& clean, const ImageTensor& restored,
                               const ArtifactMask& m) {
  const ImageTensor a = clean.converted(ValueDomain::byte255), b = restored.converted(ValueDomain::byte255);
  MetricRow r;
  r.id = std::move(id);
  r.l2_region = l2_region(a, b, m);
  r.mse = mse(a, b);
  r.ssim = ssim(a, b);
  r.psnr = psnr_from_mse(r.mse, 255.0);
  r.fsim = fsim(a, b);
  r.sre = sre(a, b);
  r.mse_unit01 = r.mse / (255.0 * 255.0);
  r.psnr_unit01 = psnr_from_mse(r.mse_unit01, 1.0);
  return r;
}

/// Column names in report order; l2_region is reported scaled by 1e-4.
inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> c{"l2_region_x1e-4", "mse", "ssim", "psnr", "fsim", "sre"};
  return c;
}

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

inline nlohmann::ordered_json metric_json(double v) {
  if (std::isfinite(v)) return v;
  return format_metric(v);
}

struct MetricsReport {
  std::vector<MetricRow> per_image;
  MetricRow aggregate;
  std::optional<Complexity> complexity;

  std::vector<double> columns(const MetricRow& r) const {
    return {r.l2_region * 1e-4, r.mse, r.ssim, r.psnr, r.fsim, r.sre, r.mse_unit01, r.psnr_unit01};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "id";
    for (const auto& c : metric_columns()) os << ',' << c;
    os << ",mse_unit01,psnr_unit01\n";
    auto row = [&](const MetricRow& r) {
      os << r.id;
      for (double v : columns(r)) os << ',' << format_metric(v);
      os << '\n';
    };
    for (const auto& r : per_image) row(r);
    row(aggregate);
    return os.str();
  }

  nlohmann::ordered_json to_json() const {
    auto row = [&](const MetricRow& r) {
      nlohmann::ordered_json j;
      j["id"] = r.id;
      const auto vals = columns(r);
      const auto& names = metric_columns();
      for (std::size_t i = 0; i < names.size(); ++i) j[names[i]] = metric_json(vals[i]);
      j["mse_unit01"] = metric_json(r.mse_unit01);
      j["psnr_unit01"] = metric_json(r.psnr_unit01);
      return j;
    };
    nlohmann::ordered_json j;
    j["columns"] = metric_columns();
    j["per_image"] = nlohmann::ordered_json::array();
    for (const auto& r : per_image) j["per_image"].push_back(row(r));
    j["aggregate"] = row(aggregate);
    if (complexity) {
      j["complexity"] = {{"params", complexity->params},
                         {"flops", complexity->flops},
                         {"mean_inference_seconds", complexity->mean_inference_seconds}};
    }
    return j;
  }
};

/// Column means; an infinite entry makes the mean infinite.
inline MetricsReport build_report(std::vector<MetricRow> rows, std::optional<Complexity> complexity = std::nullopt) {
  if (rows.empty()) throw std::invalid_argument("build_report: no rows");
  MetricsReport rep;
  rep.complexity = complexity;
  MetricRow& a = rep.aggregate;
  a.id = "mean";
  const double n = double(rows.size());
  for (const auto& r : rows) {
    a.l2_region += r.l2_region / n;
    a.mse += r.mse / n;
    a.ssim += r.ssim / n;
    a.psnr += r.psnr / n;
    a.fsim += r.fsim / n;
    a.sre += r.sre / n;
    a.mse_unit01 += r.mse_unit01 / n;
    a.psnr_unit01 += r.psnr_unit01 / n;
  }
  rep.per_image = std::move(rows);
  return rep;
}

}  // namespace artfix
