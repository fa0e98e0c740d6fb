#pragma once

// Template generation, image encryption, template recovery, and the three
// training loss terms, plus the ablation variants (template source and
// transform kind).

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodet/nn.hpp"
#include "prodet/rng.hpp"
#include "prodet/tape.hpp"
#include "prodet/tensor.hpp"

namespace prodet {

using TapeF = TapeT<float>;
using StoreF = StoreT<float>;
using Var = TapeF::Var;

enum class TemplateMode { ImageDependent, UniversalLearnable, Fixed };
enum class TransformMode { Multiply, Add };

const char* template_mode_name(TemplateMode m);
const char* transform_mode_name(TransformMode m);

struct WrapperConfig {
  // per-layer channel widths of the trunk (the 1-channel head is implicit)
  std::vector<std::size_t> encoder_widths;
  std::vector<std::size_t> decoder_widths;
  TemplateMode template_mode = TemplateMode::ImageDependent;
  TransformMode transform_mode = TransformMode::Multiply;
  bool use_decoder = true;
  double lambda_obj = 7.0;
  double lambda_e = 10.0;
  double lambda_d = 10.0;
  double final_bias_offset = 4.0;
  // Fixed-mode template value; < 0 means sigmoid(final_bias_offset).
  // Setting 1.0 with Multiply makes encryption an exact identity.
  double fixed_value = -1.0;

  WrapperConfig();
};

// 2 stem layers at 16 channels, then 13 blocks at 32
std::vector<std::size_t> default_coder_widths();

void validate(const WrapperConfig& cfg);  // throws std::invalid_argument

// Full-resolution convolutional trunk with a sigmoid single-channel head.
// With head weights scaled small and bias = bias_offset, the initial output
// map is ~sigmoid(bias_offset) everywhere (warm start near 1).
class CoderNet {
 public:
  CoderNet(StoreF& store, const std::string& prefix,
           const std::vector<std::size_t>& widths, std::size_t in_channels,
           double bias_offset, Rng& rng);

  // [N,in_c,H,W] -> [N,1,H,W] in [0,1]
  Var forward(TapeF& t, Var x, bool training);

 private:
  std::vector<ConvInReluT<float>> blocks_;
  ConvT<float> head_;
};

// Template source for one experiment arm. ImageDependent owns a CoderNet;
// UniversalLearnable owns a single [1,1,H,W] trainable logit map (shared
// across images); Fixed owns a frozen stored map with no gradients.
class TemplateProvider {
 public:
  TemplateProvider(StoreF& store, const WrapperConfig& cfg,
                   std::size_t image_size, Rng& rng);

  // [N,3,H,W] -> [N,1,H,W] in [0,1]
  Var forward(TapeF& t, Var images, bool training);

  TemplateMode mode() const { return mode_; }

 private:
  TemplateMode mode_;
  std::unique_ptr<CoderNet> encoder_;   // ImageDependent
  ParamT<float>* universal_ = nullptr;  // UniversalLearnable (logit map)
  ParamT<float>* fixed_ = nullptr;      // Fixed (value map, non-trainable)
};

// Multiply: out = image .* template (template broadcast over channels).
// Add: out = clamp(image + (template - 1), 0, 1).
template <class T>
typename TapeT<T>::Var encrypt(TapeT<T>& t, typename TapeT<T>::Var image,
                               typename TapeT<T>::Var tmpl,
                               TransformMode mode) {
  const auto is = t.val(image).shape;
  const auto ts = t.val(tmpl).shape;
  if (is.size() != 4 || ts.size() != 4 || ts[1] != 1 || is[0] != ts[0] ||
      is[2] != ts[2] || is[3] != ts[3])
    throw std::invalid_argument("encrypt: shape mismatch");
  auto wide = t.broadcast_channel(tmpl, is[1]);
  if (mode == TransformMode::Multiply) return t.mul(image, wide);
  return t.clamp01(t.add(image, t.add_const(wide, T(-1))));
}

// 1 - <a,b>/(|a||b| + eps) per row; rows of `b` that are all-zero are masked
// to contribute zero when skip_empty_reference is set; mean over all rows.
template <class T>
typename TapeT<T>::Var cosine_loss_rows(TapeT<T>& t,
                                        typename TapeT<T>::Var a_rows,
                                        typename TapeT<T>::Var b_rows,
                                        bool skip_empty_reference,
                                        T eps = T(1e-8)) {
  // val() references go stale once new nodes are pushed, so everything
  // needed from the inputs is captured before the graph grows.
  std::size_t r, c;
  TensorT<T> mask;
  {
    const TensorT<T>& av = t.val(a_rows);
    const TensorT<T>& bv = t.val(b_rows);
    if (av.rank() != 2 || !av.same_shape(bv))
      throw std::invalid_argument("cosine rows: shape mismatch");
    r = av.shape[0];
    c = av.shape[1];
    if (skip_empty_reference) {
      mask = TensorT<T>({r});
      for (std::size_t i = 0; i < r; ++i) {
        bool empty = true;
        for (std::size_t j = 0; j < c && empty; ++j)
          if (bv[i * c + j] != T(0)) empty = false;
        mask[i] = empty ? T(0) : T(1);
      }
    }
  }

  auto dots = t.reshape(t.rows_sum(t.mul(a_rows, b_rows)), {r});
  auto denom =
      t.add_const(t.mul(t.rows_l2(a_rows, T(0)), t.rows_l2(b_rows, T(0))), eps);
  auto one_minus_cos = t.add_const(t.scale(t.div(dots, denom), T(-1)), T(1));
  if (skip_empty_reference)
    one_minus_cos = t.mul(one_minus_cos, t.leaf(std::move(mask)));
  return t.mean_all(one_minus_cos);
}

// J_E = mean_i (1 - Cos(template_i, gt_map_i)); all-zero gt rows contribute 0
template <class T>
typename TapeT<T>::Var encoder_loss(TapeT<T>& t,
                                    typename TapeT<T>::Var templates_n1hw,
                                    const TensorT<T>& gt_maps_n1hw) {
  const auto tshape = t.val(templates_n1hw).shape;
  if (tshape.size() != 4 || tshape[1] != 1 || tshape != gt_maps_n1hw.shape)
    throw std::invalid_argument("encoder loss: shape mismatch");
  const std::size_t n = tshape[0], hw = tshape[2] * tshape[3];
  TensorT<T> gt = gt_maps_n1hw;
  auto a = t.reshape(templates_n1hw, {n, hw});
  auto b = t.reshape(t.leaf(std::move(gt)), {n, hw});
  return cosine_loss_rows(t, a, b, /*skip_empty_reference=*/true);
}

// J_D = mean_i (1 - Cos(recovered_i, template_i))
template <class T>
typename TapeT<T>::Var decoder_loss(TapeT<T>& t,
                                    typename TapeT<T>::Var recovered_n1hw,
                                    typename TapeT<T>::Var templates_n1hw) {
  const auto rshape = t.val(recovered_n1hw).shape;
  if (rshape.size() != 4 || rshape[1] != 1 ||
      rshape != t.val(templates_n1hw).shape)
    throw std::invalid_argument("decoder loss: shape mismatch");
  const std::size_t n = rshape[0], hw = rshape[2] * rshape[3];
  auto a = t.reshape(recovered_n1hw, {n, hw});
  auto b = t.reshape(templates_n1hw, {n, hw});
  return cosine_loss_rows(t, a, b, /*skip_empty_reference=*/false);
}

// lambda_obj*j_obj + lambda_e*j_e + lambda_d*j_d (j_d dropped without
// decoder). A NaN in any term is a hard training error.
template <class T>
typename TapeT<T>::Var total_loss(TapeT<T>& t, typename TapeT<T>::Var j_obj,
                                  typename TapeT<T>::Var j_e,
                                  typename TapeT<T>::Var j_d,
                                  const WrapperConfig& cfg) {
  auto check = [&](typename TapeT<T>::Var v, const char* which) {
    if (!v.valid()) return;
    if (std::isnan(static_cast<double>(t.val(v)[0])))
      throw std::runtime_error(std::string("NaN loss term: ") + which);
  };
  check(j_obj, "objective");
  check(j_e, "encoder");
  check(j_d, "decoder");
  auto total = t.scale(j_obj, static_cast<T>(cfg.lambda_obj));
  total = t.add(total, t.scale(j_e, static_cast<T>(cfg.lambda_e)));
  if (cfg.use_decoder && j_d.valid())
    total = t.add(total, t.scale(j_d, static_cast<T>(cfg.lambda_d)));
  return total;
}

}  // namespace prodet
