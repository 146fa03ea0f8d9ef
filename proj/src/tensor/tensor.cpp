#include "recticast/tensor.hpp"

#include <cblas.h>

#include <sstream>

namespace recticast {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
BasicTensor<T> concat0(std::span<const BasicTensor<T>> parts) {
    if (parts.empty()) {
        throw DimensionError("concat0: no tensors");
    }
    Shape out_shape = parts.front().shape();
    if (out_shape.empty()) {
        throw DimensionError("concat0: scalars have no leading axis");
    }
    std::size_t lead = 0;
    for (const auto& p : parts) {
        if (p.dim() != out_shape.size() ||
            !std::equal(p.shape().begin() + 1, p.shape().end(), out_shape.begin() + 1)) {
            throw DimensionError("concat0: trailing shape mismatch " + shape_to_string(p.shape()) +
                                 " vs " + shape_to_string(out_shape));
        }
        lead += p.shape()[0];
    }
    out_shape[0] = lead;
    std::vector<T> data;
    data.reserve(shape_numel(out_shape));
    for (const auto& p : parts) {
        data.insert(data.end(), p.storage().begin(), p.storage().end());
    }
    return BasicTensor<T>(std::move(out_shape), std::move(data));
}

template BasicTensor<float> concat0(std::span<const BasicTensor<float>>);
template BasicTensor<double> concat0(std::span<const BasicTensor<double>>);

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m,
                n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m,
                n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace recticast
