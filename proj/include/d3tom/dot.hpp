#pragma once

namespace d3tom {

// Dot product over f32 with f64 accumulation in four fixed lanes combined as
// ((s0+s1)+(s2+s3))+tail. The lane structure is part of the defined
// computation: results are identical for any thread count or schedule, and
// the compiler can keep the lanes in vector registers.
inline double dot_f32(const float* a, const float* b, int n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int t = 0;
    for (; t + 4 <= n; t += 4) {
        s0 += static_cast<double>(a[t]) * static_cast<double>(b[t]);
        s1 += static_cast<double>(a[t + 1]) * static_cast<double>(b[t + 1]);
        s2 += static_cast<double>(a[t + 2]) * static_cast<double>(b[t + 2]);
        s3 += static_cast<double>(a[t + 3]) * static_cast<double>(b[t + 3]);
    }
    double tail = 0.0;
    for (; t < n; ++t) tail += static_cast<double>(a[t]) * static_cast<double>(b[t]);
    return ((s0 + s1) + (s2 + s3)) + tail;
}

}  // namespace d3tom
