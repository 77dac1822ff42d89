#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace advtex::nn {

/// Row-major HWC activation tensor.
struct Tensor {
  int h = 0, w = 0, c = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v(static_cast<size_t>(h_) * w_ * c_, 0.0) {}

  double& at(int y, int x, int ch) { return v[(static_cast<size_t>(y) * w + x) * c + ch]; }
  double at(int y, int x, int ch) const { return v[(static_cast<size_t>(y) * w + x) * c + ch]; }
  size_t size() const { return v.size(); }
};

/// Standard normal from raw mt19937_64 output; independent of libstdc++
/// distribution internals so runs are reproducible across toolchains.
double gauss(std::mt19937_64& rng);
double uniform(std::mt19937_64& rng);  // [0,1)

struct Conv2d {
  int in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0, dilation = 1;
  std::vector<double> weight;  // [k][k][in_c][out_c]
  std::vector<double> bias;    // [out_c]
  std::vector<double> wgrad, bgrad;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride_, int pad_, int dilation_ = 1);

  void init(std::mt19937_64& rng);
  void zero_grad();
  Tensor forward(const Tensor& in) const;
  /// Returns d(loss)/d(input); accumulates weight/bias grads unless data_only.
  Tensor backward(const Tensor& in, const Tensor& dout, bool data_only = false);

  size_t weight_index(int ky, int kx, int ic, int oc) const {
    return ((static_cast<size_t>(ky) * k + kx) * in_c + ic) * out_c + oc;
  }
};

struct Dense {
  int in_n = 0, out_n = 0;
  std::vector<double> weight;  // [in][out]
  std::vector<double> bias;
  std::vector<double> wgrad, bgrad;

  Dense() = default;
  Dense(int in, int out);

  void init(std::mt19937_64& rng);
  void zero_grad();
  std::vector<double> forward(const std::vector<double>& in) const;
  std::vector<double> backward(const std::vector<double>& in, const std::vector<double>& dout,
                               bool data_only = false);
};

// Leaky ReLU with fixed slope 0.1.
Tensor leaky_relu(const Tensor& in);
Tensor leaky_relu_backward(const Tensor& in, const Tensor& dout);
void leaky_relu_inplace(std::vector<double>& v);
std::vector<double> leaky_relu_backward(const std::vector<double>& in, const std::vector<double>& dout);

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
std::vector<double> softmax(const std::vector<double>& logits);

/// One named parameter block of a model.
struct ParamRef {
  std::vector<double>* value;
  std::vector<double>* grad;
  const char* name;
};

/// Adam with bias correction; deterministic given call order.
struct Adam {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<std::vector<double>> m, v;
  long t = 0;

  void step(const std::vector<ParamRef>& params);
};

}  // namespace advtex::nn
