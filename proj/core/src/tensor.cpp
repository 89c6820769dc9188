#include "masqlab/tensor.hpp"

#include <cmath>

namespace masqlab {

real dot(const Tensor& a, const Tensor& b) {
    assert(a.size() == b.size());
    real s = 0.0;
    const real* pa = a.data();
    const real* pb = b.data();
    for (std::int64_t i = 0; i < a.size(); ++i) s += pa[i] * pb[i];
    return s;
}

real norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

bool all_finite(const Tensor& a) {
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a[i])) return false;
    }
    return true;
}

}  // namespace masqlab
