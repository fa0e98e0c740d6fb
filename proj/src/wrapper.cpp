#include "prodet/wrapper.hpp"

#include <cmath>
#include <stdexcept>

namespace prodet {

const char* template_mode_name(TemplateMode m) {
  switch (m) {
    case TemplateMode::ImageDependent: return "image_dependent";
    case TemplateMode::UniversalLearnable: return "universal_learnable";
    case TemplateMode::Fixed: return "fixed";
  }
  return "?";
}

const char* transform_mode_name(TransformMode m) {
  switch (m) {
    case TransformMode::Multiply: return "multiply";
    case TransformMode::Add: return "add";
  }
  return "?";
}

std::vector<std::size_t> default_coder_widths() {
  std::vector<std::size_t> w{16, 16};
  w.insert(w.end(), 13, 32);
  return w;
}

WrapperConfig::WrapperConfig()
    : encoder_widths(default_coder_widths()),
      decoder_widths(default_coder_widths()) {}

void validate(const WrapperConfig& cfg) {
  if (cfg.encoder_widths.empty() || cfg.decoder_widths.empty())
    throw std::invalid_argument("wrapper: empty width list");
  for (std::size_t w : cfg.encoder_widths)
    if (w == 0) throw std::invalid_argument("wrapper: zero encoder width");
  for (std::size_t w : cfg.decoder_widths)
    if (w == 0) throw std::invalid_argument("wrapper: zero decoder width");
  if (cfg.lambda_obj < 0 || cfg.lambda_e < 0 || cfg.lambda_d < 0)
    throw std::invalid_argument("wrapper: negative loss weight");
  if (cfg.lambda_obj == 0 && cfg.lambda_e == 0 && cfg.lambda_d == 0)
    throw std::invalid_argument("wrapper: all loss weights zero");
  if (cfg.fixed_value > 1.0)
    throw std::invalid_argument("wrapper: fixed_value above 1");
}

CoderNet::CoderNet(StoreF& store, const std::string& prefix,
                   const std::vector<std::size_t>& widths,
                   std::size_t in_channels, double bias_offset, Rng& rng) {
  if (widths.empty()) throw std::invalid_argument("coder: empty width list");
  std::size_t c = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    blocks_.emplace_back(store, prefix + ".b" + std::to_string(i), c,
                         widths[i], rng);
    c = widths[i];
  }
  // Small head weights + positive bias give sigmoid outputs near 1 at init,
  // so encryption starts as a near-identity map.
  head_ = ConvT<float>(store, prefix + ".head", c, 1, rng, 0.1f,
                       static_cast<float>(bias_offset));
}

Var CoderNet::forward(TapeF& t, Var x, bool training) {
  Var h = x;
  for (auto& blk : blocks_) h = blk.forward(t, h, training);
  return t.sigmoid(head_.forward(t, h));
}

TemplateProvider::TemplateProvider(StoreF& store, const WrapperConfig& cfg,
                                   std::size_t image_size, Rng& rng)
    : mode_(cfg.template_mode) {
  switch (mode_) {
    case TemplateMode::ImageDependent:
      encoder_ = std::make_unique<CoderNet>(store, "encoder",
                                            cfg.encoder_widths, 3,
                                            cfg.final_bias_offset, rng);
      break;
    case TemplateMode::UniversalLearnable:
      universal_ =
          &store.create("encoder.universal", {1, 1, image_size, image_size});
      universal_->value.fill(static_cast<float>(cfg.final_bias_offset));
      break;
    case TemplateMode::Fixed: {
      fixed_ = &store.create("encoder.fixed", {1, 1, image_size, image_size},
                             /*trainable=*/false);
      const float v =
          cfg.fixed_value >= 0.0
              ? static_cast<float>(cfg.fixed_value)
              : 1.0f / (1.0f +
                        std::exp(-static_cast<float>(cfg.final_bias_offset)));
      fixed_->value.fill(v);
      break;
    }
  }
}

Var TemplateProvider::forward(TapeF& t, Var images, bool training) {
  const auto& shape = t.val(images).shape;
  if (shape.size() != 4) throw std::invalid_argument("template: want NCHW");
  const std::size_t n = shape[0];
  switch (mode_) {
    case TemplateMode::ImageDependent:
      return encoder_->forward(t, images, training);
    case TemplateMode::UniversalLearnable:
      return t.repeat_batch(t.sigmoid(t.param(*universal_)), n);
    case TemplateMode::Fixed:
      return t.repeat_batch(t.leaf(fixed_->value), n);
  }
  throw std::logic_error("template: bad mode");
}

}  // namespace prodet
