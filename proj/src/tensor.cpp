#include "opn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace opn {

std::string to_string(const Dims4& d) {
  std::ostringstream os;
  os << "(" << d.batch << "," << d.channels << "," << d.height << "," << d.width << ")";
  return os.str();
}

Tensor4::Tensor4(Dims4 dims, double fill) : dims_(dims) {
  if (dims.batch == 0 || dims.channels == 0 || dims.height == 0 || dims.width == 0) {
    throw ShapeError("Tensor4: all dims must be >= 1, got " + to_string(dims));
  }
  values_.assign(dims.count(), fill);
}

double Tensor4::get(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
  if (b >= dims_.batch || c >= dims_.channels || h >= dims_.height || w >= dims_.width) {
    throw IndexError("Tensor4: index out of bounds for dims " + to_string(dims_));
  }
  return values_[offset(b, c, h, w)];
}

void Tensor4::set(std::size_t b, std::size_t c, std::size_t h, std::size_t w, double v) {
  if (b >= dims_.batch || c >= dims_.channels || h >= dims_.height || w >= dims_.width) {
    throw IndexError("Tensor4: index out of bounds for dims " + to_string(dims_));
  }
  values_[offset(b, c, h, w)] = v;
}

bool Tensor4::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor4 reshape(Tensor4 t, Dims4 new_dims) {
  if (new_dims.count() != t.size()) {
    throw ShapeError("reshape: element count mismatch, " + to_string(t.dims()) + " -> " +
                     to_string(new_dims));
  }
  Tensor4 out(new_dims);
  out.values() = std::move(t.values());
  return out;
}

namespace {

void require_same_dims(const Tensor4& a, const Tensor4& b, const char* op) {
  if (!(a.dims() == b.dims())) {
    throw ShapeError(std::string(op) + ": dims mismatch " + to_string(a.dims()) + " vs " +
                     to_string(b.dims()));
  }
}

template <typename F>
Tensor4 zip(const Tensor4& a, const Tensor4& b, F f) {
  Tensor4 out(a.dims());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

}  // namespace

Tensor4 add(const Tensor4& a, const Tensor4& b) {
  require_same_dims(a, b, "add");
  return zip(a, b, [](double x, double y) { return x + y; });
}

Tensor4 sub(const Tensor4& a, const Tensor4& b) {
  require_same_dims(a, b, "sub");
  return zip(a, b, [](double x, double y) { return x - y; });
}

Tensor4 mul(const Tensor4& a, const Tensor4& b) {
  require_same_dims(a, b, "mul");
  return zip(a, b, [](double x, double y) { return x * y; });
}

Tensor4 scale(const Tensor4& a, double s) {
  Tensor4 out(a.dims());
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
  return out;
}

}  // namespace opn
