#include "msd/nn/kernels.hpp"

#include <atomic>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace msd::nn::kern {

namespace {

std::atomic<bool> g_parallel{true};

// Valid output-column range for a given kernel column: ow in [lo, hi).
inline void ow_range(int kw, const ConvGeom& g, int& lo, int& hi) {
    const int a = g.pad - kw;  // need ow*stride >= a
    lo = a <= 0 ? 0 : (a + g.stride - 1) / g.stride;
    const int b = g.w_in - 1 + g.pad - kw;  // need ow*stride <= b
    hi = b < 0 ? 0 : b / g.stride + 1;
    if (hi > g.w_out()) hi = g.w_out();
    if (lo > hi) lo = hi;
}

// One output row y[n,f,oh,:]; the accumulation order over (c,kh,kw) is part
// of the kernel contract (serial and OpenMP builds must match bitwise).
template <typename T>
inline void conv_fwd_row(const T* x, const T* kernel, T* yrow, int n, int f, int oh,
                         const ConvGeom& g) {
    const int wout = g.w_out();
    for (int ow = 0; ow < wout; ++ow) yrow[ow] = T(0);
    const std::int64_t xn = static_cast<std::int64_t>(n) * g.c_in * g.h_in * g.w_in;
    for (int c = 0; c < g.c_in; ++c) {
        const T* xc = x + xn + static_cast<std::int64_t>(c) * g.h_in * g.w_in;
        const T* kc = kernel + (static_cast<std::int64_t>(f) * g.c_in + c) * g.k * g.k;
        for (int kh = 0; kh < g.k; ++kh) {
            const int ih = oh * g.stride - g.pad + kh;
            if (ih < 0 || ih >= g.h_in) continue;
            const T* xrow = xc + static_cast<std::int64_t>(ih) * g.w_in;
            for (int kw = 0; kw < g.k; ++kw) {
                const T kval = kc[kh * g.k + kw];
                int lo, hi;
                ow_range(kw, g, lo, hi);
                const int base = -g.pad + kw;
                if (g.stride == 1) {
                    const T* xp = xrow + base + lo;
                    for (int ow = lo; ow < hi; ++ow) yrow[ow] += kval * xp[ow - lo];
                } else {
                    for (int ow = lo; ow < hi; ++ow) yrow[ow] += kval * xrow[ow * g.stride + base];
                }
            }
        }
    }
}

// One input-gradient row gx[n,c,ih,:]. Scatter stays within the row, so rows
// are independent work units.
template <typename T>
inline void conv_bwd_input_row(const T* gy, const T* kernel, T* gxrow, int n, int c, int ih,
                               const ConvGeom& g) {
    const int hout = g.h_out();
    const int wout = g.w_out();
    for (int iw = 0; iw < g.w_in; ++iw) gxrow[iw] = T(0);
    const std::int64_t gyn = static_cast<std::int64_t>(n) * g.c_out * hout * wout;
    for (int f = 0; f < g.c_out; ++f) {
        const T* gyf = gy + gyn + static_cast<std::int64_t>(f) * hout * wout;
        const T* kc = kernel + (static_cast<std::int64_t>(f) * g.c_in + c) * g.k * g.k;
        for (int kh = 0; kh < g.k; ++kh) {
            const int t = ih + g.pad - kh;
            if (t < 0 || t % g.stride != 0) continue;
            const int oh = t / g.stride;
            if (oh >= hout) continue;
            const T* gyrow = gyf + static_cast<std::int64_t>(oh) * wout;
            for (int kw = 0; kw < g.k; ++kw) {
                const T kval = kc[kh * g.k + kw];
                int lo, hi;
                ow_range(kw, g, lo, hi);
                const int base = -g.pad + kw;
                for (int ow = lo; ow < hi; ++ow) gxrow[ow * g.stride + base] += kval * gyrow[ow];
            }
        }
    }
}

// One kernel-gradient element gk[f,c,kh,kw], accumulated over the batch in
// index order.
template <typename T>
inline T conv_bwd_kernel_elem(const T* x, const T* gy, int f, int c, int kh, int kw,
                              const ConvGeom& g) {
    const int hout = g.h_out();
    const int wout = g.w_out();
    T acc = T(0);
    int lo, hi;
    ow_range(kw, g, lo, hi);
    const int base = -g.pad + kw;
    for (int n = 0; n < g.n; ++n) {
        const T* xc = x + (static_cast<std::int64_t>(n) * g.c_in + c) * g.h_in * g.w_in;
        const T* gyf = gy + (static_cast<std::int64_t>(n) * g.c_out + f) * hout * wout;
        for (int oh = 0; oh < hout; ++oh) {
            const int ih = oh * g.stride - g.pad + kh;
            if (ih < 0 || ih >= g.h_in) continue;
            const T* xrow = xc + static_cast<std::int64_t>(ih) * g.w_in;
            const T* gyrow = gyf + static_cast<std::int64_t>(oh) * wout;
            if (g.stride == 1) {
                const T* xp = xrow + base + lo;
                for (int ow = lo; ow < hi; ++ow) acc += gyrow[ow] * xp[ow - lo];
            } else {
                for (int ow = lo; ow < hi; ++ow) acc += gyrow[ow] * xrow[ow * g.stride + base];
            }
        }
    }
    return acc;
}

template <typename T>
inline void nearest_code_row(const T* zrow, const T* codebook, int codes, int dim, int* index,
                             T* dist2) {
    int best = 0;
    T best_d = T(0);
    for (int k = 0; k < codes; ++k) {
        const T* e = codebook + static_cast<std::int64_t>(k) * dim;
        T d = T(0);
        for (int j = 0; j < dim; ++j) {
            const T diff = zrow[j] - e[j];
            d += diff * diff;
        }
        if (k == 0 || d < best_d) {
            best_d = d;
            best = k;
        }
    }
    *index = best;
    if (dist2) *dist2 = best_d;
}

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool enabled) { g_parallel.store(enabled, std::memory_order_relaxed); }

bool openmp_compiled() {
#ifdef _OPENMP
    return true;
#else
    return false;
#endif
}

template <typename T>
void conv2d_fwd_serial(const T* x, const T* kernel, T* y, const ConvGeom& g) {
    const int hout = g.h_out();
    const int wout = g.w_out();
    for (int n = 0; n < g.n; ++n)
        for (int f = 0; f < g.c_out; ++f)
            for (int oh = 0; oh < hout; ++oh)
                conv_fwd_row(x, kernel, y + ((static_cast<std::int64_t>(n) * g.c_out + f) * hout + oh) * wout,
                             n, f, oh, g);
}

template <typename T>
void conv2d_fwd_omp(const T* x, const T* kernel, T* y, const ConvGeom& g) {
    const int hout = g.h_out();
    const int wout = g.w_out();
    const std::int64_t rows = static_cast<std::int64_t>(g.n) * g.c_out * hout;
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        const int oh = static_cast<int>(r % hout);
        const int f = static_cast<int>((r / hout) % g.c_out);
        const int n = static_cast<int>(r / (static_cast<std::int64_t>(hout) * g.c_out));
        conv_fwd_row(x, kernel, y + r * wout, n, f, oh, g);
    }
}

template <typename T>
void conv2d_fwd(const T* x, const T* kernel, T* y, const ConvGeom& g) {
#ifdef _OPENMP
    if (parallel_enabled()) {
        conv2d_fwd_omp(x, kernel, y, g);
        return;
    }
#endif
    conv2d_fwd_serial(x, kernel, y, g);
}

template <typename T>
void conv2d_bwd_input_serial(const T* gy, const T* kernel, T* gx, const ConvGeom& g) {
    for (int n = 0; n < g.n; ++n)
        for (int c = 0; c < g.c_in; ++c)
            for (int ih = 0; ih < g.h_in; ++ih)
                conv_bwd_input_row(gy, kernel,
                                   gx + ((static_cast<std::int64_t>(n) * g.c_in + c) * g.h_in + ih) * g.w_in,
                                   n, c, ih, g);
}

template <typename T>
void conv2d_bwd_input_omp(const T* gy, const T* kernel, T* gx, const ConvGeom& g) {
    const std::int64_t rows = static_cast<std::int64_t>(g.n) * g.c_in * g.h_in;
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        const int ih = static_cast<int>(r % g.h_in);
        const int c = static_cast<int>((r / g.h_in) % g.c_in);
        const int n = static_cast<int>(r / (static_cast<std::int64_t>(g.h_in) * g.c_in));
        conv_bwd_input_row(gy, kernel, gx + r * g.w_in, n, c, ih, g);
    }
}

template <typename T>
void conv2d_bwd_input(const T* gy, const T* kernel, T* gx, const ConvGeom& g) {
#ifdef _OPENMP
    if (parallel_enabled()) {
        conv2d_bwd_input_omp(gy, kernel, gx, g);
        return;
    }
#endif
    conv2d_bwd_input_serial(gy, kernel, gx, g);
}

template <typename T>
void conv2d_bwd_kernel_serial(const T* x, const T* gy, T* gk, const ConvGeom& g) {
    for (int f = 0; f < g.c_out; ++f)
        for (int c = 0; c < g.c_in; ++c)
            for (int kh = 0; kh < g.k; ++kh)
                for (int kw = 0; kw < g.k; ++kw)
                    gk[((static_cast<std::int64_t>(f) * g.c_in + c) * g.k + kh) * g.k + kw] =
                        conv_bwd_kernel_elem(x, gy, f, c, kh, kw, g);
}

template <typename T>
void conv2d_bwd_kernel_omp(const T* x, const T* gy, T* gk, const ConvGeom& g) {
    const std::int64_t elems = g.kernel_size();
#pragma omp parallel for schedule(static)
    for (std::int64_t e = 0; e < elems; ++e) {
        const int kw = static_cast<int>(e % g.k);
        const int kh = static_cast<int>((e / g.k) % g.k);
        const int c = static_cast<int>((e / (static_cast<std::int64_t>(g.k) * g.k)) % g.c_in);
        const int f = static_cast<int>(e / (static_cast<std::int64_t>(g.k) * g.k * g.c_in));
        gk[e] = conv_bwd_kernel_elem(x, gy, f, c, kh, kw, g);
    }
}

template <typename T>
void conv2d_bwd_kernel(const T* x, const T* gy, T* gk, const ConvGeom& g) {
#ifdef _OPENMP
    if (parallel_enabled()) {
        conv2d_bwd_kernel_omp(x, gy, gk, g);
        return;
    }
#endif
    conv2d_bwd_kernel_serial(x, gy, gk, g);
}

template <typename T>
void nearest_code_serial(const T* z, int rows, const T* codebook, int codes, int dim, int* index,
                         T* dist2) {
    for (int m = 0; m < rows; ++m)
        nearest_code_row(z + static_cast<std::int64_t>(m) * dim, codebook, codes, dim, index + m,
                         dist2 ? dist2 + m : nullptr);
}

template <typename T>
void nearest_code_omp(const T* z, int rows, const T* codebook, int codes, int dim, int* index,
                      T* dist2) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < rows; ++m)
        nearest_code_row(z + static_cast<std::int64_t>(m) * dim, codebook, codes, dim, index + m,
                         dist2 ? dist2 + m : nullptr);
}

template <typename T>
void nearest_code(const T* z, int rows, const T* codebook, int codes, int dim, int* index,
                  T* dist2) {
#ifdef _OPENMP
    if (parallel_enabled()) {
        nearest_code_omp(z, rows, codebook, codes, dim, index, dist2);
        return;
    }
#endif
    nearest_code_serial(z, rows, codebook, codes, dim, index, dist2);
}

#define MSD_INSTANTIATE(T)                                                                  \
    template void conv2d_fwd_serial<T>(const T*, const T*, T*, const ConvGeom&);            \
    template void conv2d_fwd_omp<T>(const T*, const T*, T*, const ConvGeom&);               \
    template void conv2d_fwd<T>(const T*, const T*, T*, const ConvGeom&);                   \
    template void conv2d_bwd_input_serial<T>(const T*, const T*, T*, const ConvGeom&);      \
    template void conv2d_bwd_input_omp<T>(const T*, const T*, T*, const ConvGeom&);         \
    template void conv2d_bwd_input<T>(const T*, const T*, T*, const ConvGeom&);             \
    template void conv2d_bwd_kernel_serial<T>(const T*, const T*, T*, const ConvGeom&);     \
    template void conv2d_bwd_kernel_omp<T>(const T*, const T*, T*, const ConvGeom&);        \
    template void conv2d_bwd_kernel<T>(const T*, const T*, T*, const ConvGeom&);            \
    template void nearest_code_serial<T>(const T*, int, const T*, int, int, int*, T*);      \
    template void nearest_code_omp<T>(const T*, int, const T*, int, int, int*, T*);         \
    template void nearest_code<T>(const T*, int, const T*, int, int, int*, T*);

MSD_INSTANTIATE(float)
MSD_INSTANTIATE(double)

#undef MSD_INSTANTIATE

}  // namespace msd::nn::kern
