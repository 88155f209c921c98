// Compute kernels for the hot loops. Every kernel exists in two builds: a
// plain serial reference and an OpenMP variant. Both accumulate each output
// element in the same fixed order, so their results are bit-identical; the
// tests rely on that and the bench target compares their throughput.
#pragma once

#include <cstdint>

namespace msd::nn::kern {

// Geometry of a forward convolution; conv_transpose reuses it with the
// input/output roles swapped.
struct ConvGeom {
    int n = 1;       // batch
    int c_in = 1;    // input channels
    int h_in = 0, w_in = 0;
    int c_out = 1;   // kernel count; kernel tensor is [c_out, c_in, k, k]
    int k = 3;
    int stride = 1;
    int pad = 0;

    int h_out() const { return (h_in + 2 * pad - k) / stride + 1; }
    int w_out() const { return (w_in + 2 * pad - k) / stride + 1; }
    std::int64_t in_size() const { return static_cast<std::int64_t>(n) * c_in * h_in * w_in; }
    std::int64_t out_size() const { return static_cast<std::int64_t>(n) * c_out * h_out() * w_out(); }
    std::int64_t kernel_size() const { return static_cast<std::int64_t>(c_out) * c_in * k * k; }
};

// Global switch between the serial and OpenMP variants (default: parallel
// when compiled with OpenMP). Nested parallel regions fall back to serial
// execution automatically.
bool parallel_enabled();
void set_parallel(bool enabled);
bool openmp_compiled();

// y[n,f,oh,ow] = sum_{c,kh,kw} x[n,c,oh*s-p+kh,ow*s-p+kw] * K[f,c,kh,kw]
template <typename T>
void conv2d_fwd_serial(const T* x, const T* kernel, T* y, const ConvGeom& g);
template <typename T>
void conv2d_fwd_omp(const T* x, const T* kernel, T* y, const ConvGeom& g);
template <typename T>
void conv2d_fwd(const T* x, const T* kernel, T* y, const ConvGeom& g);

// gx[n,c,ih,iw] = sum_{f,kh,kw} gy[n,f,oh,ow] * K[f,c,kh,kw]; also the
// forward map of conv_transpose.
template <typename T>
void conv2d_bwd_input_serial(const T* gy, const T* kernel, T* gx, const ConvGeom& g);
template <typename T>
void conv2d_bwd_input_omp(const T* gy, const T* kernel, T* gx, const ConvGeom& g);
template <typename T>
void conv2d_bwd_input(const T* gy, const T* kernel, T* gx, const ConvGeom& g);

// gk[f,c,kh,kw] = sum_{n,oh,ow} gy[n,f,oh,ow] * x[n,c,oh*s-p+kh,ow*s-p+kw]
template <typename T>
void conv2d_bwd_kernel_serial(const T* x, const T* gy, T* gk, const ConvGeom& g);
template <typename T>
void conv2d_bwd_kernel_omp(const T* x, const T* gy, T* gk, const ConvGeom& g);
template <typename T>
void conv2d_bwd_kernel(const T* x, const T* gy, T* gk, const ConvGeom& g);

// Nearest codebook entry per row of z under squared euclidean distance, ties
// to the lowest index. dist2 (optional) receives the winning distance.
template <typename T>
void nearest_code_serial(const T* z, int rows, const T* codebook, int codes, int dim,
                         int* index, T* dist2);
template <typename T>
void nearest_code_omp(const T* z, int rows, const T* codebook, int codes, int dim,
                      int* index, T* dist2);
template <typename T>
void nearest_code(const T* z, int rows, const T* codebook, int codes, int dim,
                  int* index, T* dist2);

}  // namespace msd::nn::kern
