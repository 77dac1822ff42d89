#include "advtex/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace advtex::nn {

double uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
}

double gauss(std::mt19937_64& rng) {
  // Box-Muller on raw engine output.
  double u1 = uniform(rng);
  const double u2 = uniform(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Conv2d::Conv2d(int in, int out, int kernel, int stride_, int pad_, int dilation_)
    : in_c(in), out_c(out), k(kernel), stride(stride_), pad(pad_), dilation(dilation_),
      weight(static_cast<size_t>(kernel) * kernel * in * out, 0.0),
      bias(out, 0.0),
      wgrad(weight.size(), 0.0),
      bgrad(out, 0.0) {}

void Conv2d::init(std::mt19937_64& rng) {
  const double scale = std::sqrt(2.0 / (static_cast<double>(k) * k * in_c));
  for (double& w : weight) w = scale * gauss(rng);
  for (double& b : bias) b = 0.0;
}

void Conv2d::zero_grad() {
  std::fill(wgrad.begin(), wgrad.end(), 0.0);
  std::fill(bgrad.begin(), bgrad.end(), 0.0);
}

Tensor Conv2d::forward(const Tensor& in) const {
  if (in.c != in_c) throw std::runtime_error("Conv2d::forward: channel mismatch");
  const int span = dilation * (k - 1) + 1;
  const int oh = (in.h + 2 * pad - span) / stride + 1;
  const int ow = (in.w + 2 * pad - span) / stride + 1;
  Tensor out(oh, ow, out_c);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      double* acc = &out.v[(static_cast<size_t>(oy) * ow + ox) * out_c];
      for (int oc = 0; oc < out_c; ++oc) acc[oc] = bias[oc];
      const int iy0 = oy * stride - pad;
      const int ix0 = ox * stride - pad;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = iy0 + ky * dilation;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ix0 + kx * dilation;
          if (ix < 0 || ix >= in.w) continue;
          const double* src = &in.v[(static_cast<size_t>(iy) * in.w + ix) * in_c];
          const double* wrow = &weight[weight_index(ky, kx, 0, 0)];
          for (int ic = 0; ic < in_c; ++ic) {
            const double x = src[ic];
            const double* wp = wrow + static_cast<size_t>(ic) * out_c;
            for (int oc = 0; oc < out_c; ++oc) acc[oc] += x * wp[oc];
          }
        }
      }
    }
  return out;
}

Tensor Conv2d::backward(const Tensor& in, const Tensor& dout, bool data_only) {
  Tensor din(in.h, in.w, in.c);
  const int oh = dout.h, ow = dout.w;
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const double* gout = &dout.v[(static_cast<size_t>(oy) * ow + ox) * out_c];
      if (!data_only)
        for (int oc = 0; oc < out_c; ++oc) bgrad[oc] += gout[oc];
      const int iy0 = oy * stride - pad;
      const int ix0 = ox * stride - pad;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = iy0 + ky * dilation;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ix0 + kx * dilation;
          if (ix < 0 || ix >= in.w) continue;
          const double* src = &in.v[(static_cast<size_t>(iy) * in.w + ix) * in_c];
          double* dst = &din.v[(static_cast<size_t>(iy) * in.w + ix) * in_c];
          const double* wrow = &weight[weight_index(ky, kx, 0, 0)];
          double* grow = &wgrad[weight_index(ky, kx, 0, 0)];
          for (int ic = 0; ic < in_c; ++ic) {
            const double* wp = wrow + static_cast<size_t>(ic) * out_c;
            double acc = 0.0;
            for (int oc = 0; oc < out_c; ++oc) acc += wp[oc] * gout[oc];
            dst[ic] += acc;
            if (!data_only) {
              double* gp = grow + static_cast<size_t>(ic) * out_c;
              const double x = src[ic];
              for (int oc = 0; oc < out_c; ++oc) gp[oc] += x * gout[oc];
            }
          }
        }
      }
    }
  return din;
}

Dense::Dense(int in, int out)
    : in_n(in), out_n(out),
      weight(static_cast<size_t>(in) * out, 0.0),
      bias(out, 0.0),
      wgrad(weight.size(), 0.0),
      bgrad(out, 0.0) {}

void Dense::init(std::mt19937_64& rng) {
  const double scale = std::sqrt(2.0 / in_n);
  for (double& w : weight) w = scale * gauss(rng);
  for (double& b : bias) b = 0.0;
}

void Dense::zero_grad() {
  std::fill(wgrad.begin(), wgrad.end(), 0.0);
  std::fill(bgrad.begin(), bgrad.end(), 0.0);
}

std::vector<double> Dense::forward(const std::vector<double>& in) const {
  if (static_cast<int>(in.size()) != in_n) throw std::runtime_error("Dense::forward: size mismatch");
  std::vector<double> out(bias);
  for (int i = 0; i < in_n; ++i) {
    const double x = in[i];
    const double* wp = &weight[static_cast<size_t>(i) * out_n];
    for (int o = 0; o < out_n; ++o) out[o] += x * wp[o];
  }
  return out;
}

std::vector<double> Dense::backward(const std::vector<double>& in, const std::vector<double>& dout,
                                    bool data_only) {
  std::vector<double> din(in_n, 0.0);
  for (int i = 0; i < in_n; ++i) {
    const double* wp = &weight[static_cast<size_t>(i) * out_n];
    double acc = 0.0;
    for (int o = 0; o < out_n; ++o) acc += wp[o] * dout[o];
    din[i] = acc;
    if (!data_only) {
      double* gp = &wgrad[static_cast<size_t>(i) * out_n];
      const double x = in[i];
      for (int o = 0; o < out_n; ++o) gp[o] += x * dout[o];
    }
  }
  if (!data_only)
    for (int o = 0; o < out_n; ++o) bgrad[o] += dout[o];
  return din;
}

namespace {
constexpr double kLeakSlope = 0.1;
}

Tensor leaky_relu(const Tensor& in) {
  Tensor out = in;
  for (double& x : out.v)
    if (x < 0) x *= kLeakSlope;
  return out;
}

Tensor leaky_relu_backward(const Tensor& in, const Tensor& dout) {
  Tensor din = dout;
  for (size_t i = 0; i < in.v.size(); ++i)
    if (in.v[i] < 0) din.v[i] *= kLeakSlope;
  return din;
}

void leaky_relu_inplace(std::vector<double>& v) {
  for (double& x : v)
    if (x < 0) x *= kLeakSlope;
}

std::vector<double> leaky_relu_backward(const std::vector<double>& in, const std::vector<double>& dout) {
  std::vector<double> din = dout;
  for (size_t i = 0; i < in.size(); ++i)
    if (in[i] < 0) din[i] *= kLeakSlope;
  return din;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double z : logits) mx = std::max(mx, z);
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

void Adam::step(const std::vector<ParamRef>& params) {
  if (m.empty()) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i].value->size(), 0.0);
      v[i].assign(params[i].value->size(), 0.0);
    }
  }
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    std::vector<double>& val = *params[i].value;
    const std::vector<double>& g = *params[i].grad;
    for (size_t j = 0; j < val.size(); ++j) {
      m[i][j] = beta1 * m[i][j] + (1 - beta1) * g[j];
      v[i][j] = beta2 * v[i][j] + (1 - beta2) * g[j] * g[j];
      val[j] -= lr * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
    }
  }
}

}  // namespace advtex::nn
