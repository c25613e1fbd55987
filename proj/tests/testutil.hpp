#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "seqtwin/rng.hpp"
#include "seqtwin/tensor.hpp"

namespace testutil {

// Relative error with an absolute escape hatch for near-zero pairs:
// err = |a-b| / (|a| + |b| + floor), so err < rtol is the usual
// |a-b| <= rtol*(|a|+|b|) + atol with atol = rtol*floor.
inline double rel_err(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / (std::abs(a) + std::abs(b) + floor);
}

// Central differences of f carry ~kappa*eps*|f|/h absolute noise from the
// rounding of each loss evaluation (kappa absorbs summation-length growth).
// Folding that allowance into the rel_err denominator keeps large gradients
// checked at rtol while not failing gradients below the FD resolution.
inline double fd_denom_floor(double f_magnitude, double h = 1e-5, double rtol = 1e-4,
                             double kappa = 512.0) {
  const double eps = 2.220446049250313e-16;
  return std::max(1e-4, kappa * eps * std::abs(f_magnitude) / (h * rtol));
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// Central finite differences (default h=1e-5) against the recorded gradient
// of `param`. `forward` must recompute the scalar loss from current values
// without recording anything. Call after backward() has filled param.grad.
inline GradCheckReport check_gradient(seqtwin::Tensor param,
                                      const std::function<double()>& forward, double h = 1e-5,
                                      std::size_t max_entries = 0, double denom_floor = 1e-4) {
  GradCheckReport report;
  const std::size_t n = param.size();
  const std::size_t step = (max_entries && max_entries < n) ? n / max_entries : 1;
  for (std::size_t i = 0; i < n; i += step) {
    double* v = param.data() + i;
    const double saved = *v;
    *v = saved + h;
    const double up = forward();
    *v = saved - h;
    const double down = forward();
    *v = saved;
    const double fd = (up - down) / (2.0 * h);
    const double bp = param.has_grad() ? param.grad()[i] : 0.0;
    report.max_rel_err = std::max(report.max_rel_err, rel_err(fd, bp, denom_floor));
    ++report.checked;
  }
  return report;
}

inline seqtwin::Tensor random_tensor(std::vector<int> shape, seqtwin::Rng& rng,
                                     bool requires_grad = true, double scale = 1.0) {
  seqtwin::Tensor t = seqtwin::Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.values()) v = (rng.next_double() * 2.0 - 1.0) * scale;
  return t;
}

// Unique scratch directory beneath the build tree; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("seqtwin-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  out << content;
}

}  // namespace testutil
