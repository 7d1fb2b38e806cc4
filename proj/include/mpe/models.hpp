#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mpe/nn/attention.hpp"
#include "mpe/nn/layers.hpp"
#include "mpe/nn/lstm.hpp"

namespace mpe {

constexpr int kHarmonics = 6;
constexpr int kBins = 216;
constexpr int kPatchFrames = 75;
constexpr int kPatchContext = 37;
constexpr int kPitches = 72;
constexpr int kPolyClasses = 24;
constexpr int kLowestMidi = 24;

enum class Family { CNN, DCNN, DRCNN, Unet, SAUnet, SAUSnet, BLUnet, PUnet };

std::string family_name(Family f);
Family family_from_string(const std::string& s);

struct ModelConfig {
  Family family = Family::CNN;
  int n0 = 20, n1 = 20, n2 = 10, n3 = 1;   // back-end channel widths
  int gamma = 0;                           // U-net base width
  int lambda = 0;                          // transformer FF hidden / BLSTM hidden
  int blstm_layers = 1;
  double dropout = 0.2;
  double leaky_slope = 0.3;
  double initial_lr = 1e-3;
  bool positional_encoding = true;
  std::string name;

  bool is_unet_family() const {
    return family == Family::Unet || family == Family::SAUnet || family == Family::SAUSnet ||
           family == Family::BLUnet || family == Family::PUnet;
  }
  bool is_conv_family() const { return !is_unet_family(); }

  void validate() const;
};

struct ZooEntry {
  ModelConfig config;
  int64_t published_thousands;  // reference parameter count, in units of 1e3
};

// The full published size grid, keyed "FAMILY:SIZE" (e.g. "SAUnet:L").
const std::vector<ZooEntry>& model_zoo();
ModelConfig zoo_config(const std::string& name);

template <typename T>
struct ModelOut {
  Tensor<T> pitch;        // [B, OT, 72], sigmoid activations
  Tensor<T> poly_logits;  // [B, 24] for the polyphony head, empty otherwise
};

// ---------------------------------------------------------------------------

template <typename T>
class DoubleConv {
 public:
  DoubleConv(int ic, int oc, nn::RunState* state, const std::string& name)
      : c1_(ic, oc, 5, 5, 1, 1, 2, 2, name + ".c1"), b1_(oc, state, name + ".bn1"),
        c2_(oc, oc, 5, 5, 1, 1, 2, 2, name + ".c2"), b2_(oc, state, name + ".bn2") {}

  void init(Rng& rng) {
    c1_.init(rng);
    c2_.init(rng);
  }
  Tensor<T> forward(const Tensor<T>& x) {
    return r2_.forward(b2_.forward(c2_.forward(r1_.forward(b1_.forward(c1_.forward(x))))));
  }
  Tensor<T> backward(const Tensor<T>& g) {
    return c1_.backward(b1_.backward(r1_.backward(c2_.backward(b2_.backward(r2_.backward(g))))));
  }
  void collect_params(std::vector<nn::Param<T>*>& out) {
    c1_.collect_params(out);
    b1_.collect_params(out);
    c2_.collect_params(out);
    b2_.collect_params(out);
  }
  void register_convs(std::vector<nn::Conv2d<T>*>& v) {
    v.push_back(&c1_);
    v.push_back(&c2_);
  }

 private:
  nn::Conv2d<T> c1_;
  nn::BatchNorm2d<T> b1_;
  nn::ReLU<T> r1_;
  nn::Conv2d<T> c2_;
  nn::BatchNorm2d<T> b2_;
  nn::ReLU<T> r2_;
};

// Two transformer encoder blocks applied to a [B, C, H, W] map flattened to a
// (time x frequency) token sequence with C-dimensional embeddings.
template <typename T>
class AttentionBridge {
 public:
  AttentionBridge(int d, int ff_hidden, double dropout, bool pos_enc, nn::RunState* state,
                  const std::string& name)
      : d_(d), pos_enc_(pos_enc),
        blk1_(d, ff_hidden, 8, static_cast<T>(dropout), state, name + ".t1"),
        blk2_(d, ff_hidden, 8, static_cast<T>(dropout), state, name + ".t2") {}

  void init(Rng& rng) {
    blk1_.init(rng);
    blk2_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    b_ = x.dim(0);
    c_ = x.dim(1);
    h_ = x.dim(2);
    w_ = x.dim(3);
    MPE_CHECK(c_ == d_, "attention bridge channel mismatch");
    Tensor<T> seq({b_, h_ * w_, c_});
    for (int64_t b = 0; b < b_; ++b)
      for (int64_t c = 0; c < c_; ++c)
        for (int64_t i = 0; i < h_; ++i)
          for (int64_t j = 0; j < w_; ++j) seq.at(b, i * w_ + j, c) = x.at(b, c, i, j);
    if (pos_enc_) nn::add_positional_encoding(seq);
    seq = blk2_.forward(blk1_.forward(seq));
    Tensor<T> y({b_, c_, h_, w_});
    for (int64_t b = 0; b < b_; ++b)
      for (int64_t c = 0; c < c_; ++c)
        for (int64_t i = 0; i < h_; ++i)
          for (int64_t j = 0; j < w_; ++j) y.at(b, c, i, j) = seq.at(b, i * w_ + j, c);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gseq({b_, h_ * w_, c_});
    for (int64_t b = 0; b < b_; ++b)
      for (int64_t c = 0; c < c_; ++c)
        for (int64_t i = 0; i < h_; ++i)
          for (int64_t j = 0; j < w_; ++j) gseq.at(b, i * w_ + j, c) = gy.at(b, c, i, j);
    gseq = blk1_.backward(blk2_.backward(gseq));
    Tensor<T> gx({b_, c_, h_, w_});
    for (int64_t b = 0; b < b_; ++b)
      for (int64_t c = 0; c < c_; ++c)
        for (int64_t i = 0; i < h_; ++i)
          for (int64_t j = 0; j < w_; ++j) gx.at(b, c, i, j) = gseq.at(b, i * w_ + j, c);
    return gx;
  }

  void collect_params(std::vector<nn::Param<T>*>& out) {
    blk1_.collect_params(out);
    blk2_.collect_params(out);
  }

 private:
  int d_;
  bool pos_enc_;
  int64_t b_ = 0, c_ = 0, h_ = 0, w_ = 0;
  nn::TransformerBlock<T> blk1_, blk2_;
};

// Bidirectional LSTM over the bottleneck time axis; each step sees the
// flattened (channel x frequency) vector. When 2*hidden matches that width the
// output maps straight back, otherwise a linear projection restores it.
template <typename T>
class BlstmBridge {
 public:
  BlstmBridge(int channels, int freq, int hidden, int layers, const std::string& name)
      : channels_(channels), freq_(freq),
        lstm_(channels * freq, hidden, layers, name + ".lstm") {
    if (2 * hidden != channels * freq)
      proj_ = std::make_unique<nn::Linear<T>>(2 * hidden, channels * freq, name + ".proj");
  }

  void init(Rng& rng) {
    lstm_.init(rng);
    if (proj_) proj_->init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    b_ = x.dim(0);
    h_ = x.dim(2);
    MPE_CHECK(x.dim(1) == channels_ && x.dim(3) == freq_, "blstm bridge shape mismatch");
    Tensor<T> seq({b_, h_, static_cast<int64_t>(channels_) * freq_});
    for (int64_t b = 0; b < b_; ++b)
      for (int64_t c = 0; c < channels_; ++c)
        for (int64_t i = 0; i < h_; ++i)
          for (int64_t j = 0; j < freq_; ++j) seq.at(b, i, c * freq_ + j) = x.at(b, c, i, j);
    Tensor<T> out = lstm_.forward(seq);
    if (proj_) out = proj_->forward(out);
    Tensor<T> y({b_, channels_, h_, freq_});
    for (int64_t b = 0; b < b_; ++b)
      for (int64_t c = 0; c < channels_; ++c)
        for (int64_t i = 0; i < h_; ++i)
          for (int64_t j = 0; j < freq_; ++j) y.at(b, c, i, j) = out.at(b, i, c * freq_ + j);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gout({b_, h_, static_cast<int64_t>(channels_) * freq_});
    for (int64_t b = 0; b < b_; ++b)
      for (int64_t c = 0; c < channels_; ++c)
        for (int64_t i = 0; i < h_; ++i)
          for (int64_t j = 0; j < freq_; ++j) gout.at(b, i, c * freq_ + j) = gy.at(b, c, i, j);
    if (proj_) gout = proj_->backward(gout);
    Tensor<T> gseq = lstm_.backward(gout);
    Tensor<T> gx({b_, channels_, h_, freq_});
    for (int64_t b = 0; b < b_; ++b)
      for (int64_t c = 0; c < channels_; ++c)
        for (int64_t i = 0; i < h_; ++i)
          for (int64_t j = 0; j < freq_; ++j) gx.at(b, c, i, j) = gseq.at(b, i, c * freq_ + j);
    return gx;
  }

  void collect_params(std::vector<nn::Param<T>*>& out) {
    lstm_.collect_params(out);
    if (proj_) proj_->collect_params(out);
  }

 private:
  int channels_, freq_;
  int64_t b_ = 0, h_ = 0;
  nn::BiLstm<T> lstm_;
  std::unique_ptr<nn::Linear<T>> proj_;
};

// Four-level U-net with concatenating skip connections. Encoder widths are
// (g, 2g, 4g, 8g) with an 8g bottleneck; decoder stages emit the width of the
// skip they consume. Optional sequence modules sit at the bottleneck and on
// the lowest skip connection.
template <typename T>
class UNetCore {
 public:
  UNetCore(const ModelConfig& cfg, nn::RunState* state, const std::string& name)
      : g_(cfg.gamma), inc_(kHarmonics, g_, state, name + ".inc"),
        d1_(g_, 2 * g_, state, name + ".down1"), d2_(2 * g_, 4 * g_, state, name + ".down2"),
        d3_(4 * g_, 8 * g_, state, name + ".down3"), d4_(8 * g_, 8 * g_, state, name + ".down4"),
        u1_(16 * g_, 8 * g_, state, name + ".up1"), u2_(12 * g_, 4 * g_, state, name + ".up2"),
        u3_(6 * g_, 2 * g_, state, name + ".up3"), u4_(3 * g_, g_, state, name + ".up4"),
        p1_(2, 2, 2, 2), p2_(2, 2, 2, 2), p3_(2, 2, 2, 2), p4_(2, 2, 2, 2) {
    const int d = 8 * g_;
    if (cfg.family == Family::SAUnet || cfg.family == Family::SAUSnet)
      bottleneck_attn_ = std::make_unique<AttentionBridge<T>>(
          d, cfg.lambda, cfg.dropout, cfg.positional_encoding, state, name + ".bottleneck");
    if (cfg.family == Family::SAUSnet)
      skip_attn_ = std::make_unique<AttentionBridge<T>>(
          d, cfg.lambda, cfg.dropout, cfg.positional_encoding, state, name + ".skip");
    if (cfg.family == Family::BLUnet) {
      // frequency extent after four halvings of 216 bins
      const int freq = kBins / 16;  // 13
      blstm_ = std::make_unique<BlstmBridge<T>>(d, freq, cfg.lambda, cfg.blstm_layers,
                                                name + ".bottleneck");
    }
  }

  void init(Rng& rng) {
    inc_.init(rng);
    d1_.init(rng);
    d2_.init(rng);
    d3_.init(rng);
    d4_.init(rng);
    if (bottleneck_attn_) bottleneck_attn_->init(rng);
    if (skip_attn_) skip_attn_->init(rng);
    if (blstm_) blstm_->init(rng);
    u1_.init(rng);
    u2_.init(rng);
    u3_.init(rng);
    u4_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    x0_ = inc_.forward(x);
    x1_ = d1_.forward(p1_.forward(x0_));
    x2_ = d2_.forward(p2_.forward(x1_));
    x3_ = d3_.forward(p3_.forward(x2_));
    Tensor<T> x4 = d4_.forward(p4_.forward(x3_));
    if (bottleneck_attn_) x4 = bottleneck_attn_->forward(x4);
    if (blstm_) x4 = blstm_->forward(x4);
    bottleneck_ = x4;
    Tensor<T> skip3 = skip_attn_ ? skip_attn_->forward(x3_) : x3_;
    s4_ = {x4.dim(2), x4.dim(3)};
    Tensor<T> y = u1_.forward(nn::concat_channels(nn::upsample2_nearest(x4, x3_.dim(2), x3_.dim(3)), skip3));
    s3_ = {y.dim(2), y.dim(3)};
    y = u2_.forward(nn::concat_channels(nn::upsample2_nearest(y, x2_.dim(2), x2_.dim(3)), x2_));
    s2_ = {y.dim(2), y.dim(3)};
    y = u3_.forward(nn::concat_channels(nn::upsample2_nearest(y, x1_.dim(2), x1_.dim(3)), x1_));
    s1_ = {y.dim(2), y.dim(3)};
    y = u4_.forward(nn::concat_channels(nn::upsample2_nearest(y, x0_.dim(2), x0_.dim(3)), x0_));
    return y;
  }

  // gbott, when present, is an extra gradient flowing into the bottleneck
  // output (from the polyphony head).
  Tensor<T> backward(const Tensor<T>& gy, const Tensor<T>* gbott) {
    Tensor<T> g = u4_.backward(gy);
    Tensor<T> gup, gskip;
    nn::split_channels(g, 2 * static_cast<int64_t>(g_), gup, gskip);
    Tensor<T> gx0 = gskip;
    g = u3_.backward(nn::upsample2_nearest_backward(gup, s1_[0], s1_[1]));
    nn::split_channels(g, 4 * static_cast<int64_t>(g_), gup, gskip);
    Tensor<T> gx1 = gskip;
    g = u2_.backward(nn::upsample2_nearest_backward(gup, s2_[0], s2_[1]));
    nn::split_channels(g, 8 * static_cast<int64_t>(g_), gup, gskip);
    Tensor<T> gx2 = gskip;
    g = u1_.backward(nn::upsample2_nearest_backward(gup, s3_[0], s3_[1]));
    nn::split_channels(g, 8 * static_cast<int64_t>(g_), gup, gskip);
    Tensor<T> gx3 = skip_attn_ ? skip_attn_->backward(gskip) : gskip;
    Tensor<T> g4 = nn::upsample2_nearest_backward(gup, s4_[0], s4_[1]);
    if (gbott)
      for (int64_t i = 0; i < g4.numel(); ++i) g4.at(i) += gbott->at(i);
    if (blstm_) g4 = blstm_->backward(g4);
    if (bottleneck_attn_) g4 = bottleneck_attn_->backward(g4);
    Tensor<T> gp = p4_.backward(d4_.backward(g4));
    for (int64_t i = 0; i < gx3.numel(); ++i) gx3.at(i) += gp.at(i);
    gp = p3_.backward(d3_.backward(gx3));
    for (int64_t i = 0; i < gx2.numel(); ++i) gx2.at(i) += gp.at(i);
    gp = p2_.backward(d2_.backward(gx2));
    for (int64_t i = 0; i < gx1.numel(); ++i) gx1.at(i) += gp.at(i);
    gp = p1_.backward(d1_.backward(gx1));
    for (int64_t i = 0; i < gx0.numel(); ++i) gx0.at(i) += gp.at(i);
    return inc_.backward(gx0);
  }

  const Tensor<T>& bottleneck() const { return bottleneck_; }
  int bottleneck_channels() const { return 8 * g_; }

  void collect_params(std::vector<nn::Param<T>*>& out) {
    inc_.collect_params(out);
    d1_.collect_params(out);
    d2_.collect_params(out);
    d3_.collect_params(out);
    d4_.collect_params(out);
    if (bottleneck_attn_) bottleneck_attn_->collect_params(out);
    if (skip_attn_) skip_attn_->collect_params(out);
    if (blstm_) blstm_->collect_params(out);
    u1_.collect_params(out);
    u2_.collect_params(out);
    u3_.collect_params(out);
    u4_.collect_params(out);
  }

  void register_convs(std::vector<nn::Conv2d<T>*>& v) {
    inc_.register_convs(v);
    d1_.register_convs(v);
    d2_.register_convs(v);
    d3_.register_convs(v);
    d4_.register_convs(v);
    u1_.register_convs(v);
    u2_.register_convs(v);
    u3_.register_convs(v);
    u4_.register_convs(v);
  }

 private:
  int g_;
  DoubleConv<T> inc_, d1_, d2_, d3_, d4_, u1_, u2_, u3_, u4_;
  nn::MaxPool2d<T> p1_, p2_, p3_, p4_;
  std::unique_ptr<AttentionBridge<T>> bottleneck_attn_, skip_attn_;
  std::unique_ptr<BlstmBridge<T>> blstm_;
  Tensor<T> x0_, x1_, x2_, x3_, bottleneck_;
  std::array<int64_t, 2> s1_{}, s2_{}, s3_{}, s4_{};
};

// ---------------------------------------------------------------------------
// The complete estimator: input layer norm, a family-specific front end, and
// the shared convolutional reduction stack
//   prefilter (15x15) -> pitch reduction (3x3, stride 3 over bins, 13x1 max
//   pool) -> temporal reduction (75x1) -> channel reduction (two 1x1) ->
//   sigmoid over 72 semitones.

template <typename T>
class PitchNet {
 public:
  explicit PitchNet(const ModelConfig& cfg);

  void init(uint64_t seed);
  ModelOut<T> forward(const Tensor<T>& x);
  // Gradients of both heads; gpoly may be empty for single-task families.
  Tensor<T> backward(const Tensor<T>& gpitch, const Tensor<T>& gpoly);

  void set_training(bool training);
  bool training() const { return state_.training; }
  void set_step(uint64_t step) { state_.step = step; }

  std::vector<nn::Param<T>*> params();
  int64_t count_params();

  const ModelConfig& config() const { return cfg_; }
  nn::RunState& state() { return state_; }

 private:
  ModelConfig cfg_;
  nn::RunState state_;

  nn::FrameLayerNorm<T> ln_;
  std::unique_ptr<UNetCore<T>> unet_;
  std::unique_ptr<nn::Conv2d<T>> conv1_;
  nn::LeakyReLU<T> act1_;
  std::unique_ptr<nn::Dropout<T>> drop1_;
  std::vector<std::unique_ptr<nn::Conv2d<T>>> replicas_;
  std::vector<std::unique_ptr<nn::LeakyReLU<T>>> replica_act_;
  std::vector<std::unique_ptr<nn::Dropout<T>>> replica_drop_;

  std::unique_ptr<nn::Conv2d<T>> conv2_;
  nn::LeakyReLU<T> act2_;
  nn::MaxPool2d<T> pool2_;
  std::unique_ptr<nn::Dropout<T>> drop2_;
  std::unique_ptr<nn::Conv2d<T>> conv3_;
  nn::LeakyReLU<T> act3_;
  std::unique_ptr<nn::Dropout<T>> drop3_;
  std::unique_ptr<nn::Conv2d<T>> conv4a_;
  nn::LeakyReLU<T> act4_;
  std::unique_ptr<nn::Dropout<T>> drop4_;
  std::unique_ptr<nn::Conv2d<T>> conv4b_;
  nn::Sigmoid<T> sigmoid_;

  // polyphony head (PUnet)
  std::unique_ptr<nn::Conv2d<T>> poly1_;
  nn::LeakyReLU<T> poly_act_;
  std::unique_ptr<nn::Conv2d<T>> poly2_;
  std::array<int64_t, 2> poly_hw_{};
  Tensor<T> poly_pre_pool_;

  std::vector<nn::Conv2d<T>*> convs_;
  int64_t out_frames_ = 0;
};

using PitchNetF = PitchNet<float>;
using PitchNetD = PitchNet<double>;

// ---------------------------------------------------------------------------

template <typename T>
PitchNet<T>::PitchNet(const ModelConfig& cfg)
    : cfg_(cfg), ln_(kHarmonics, kBins),
      act1_(static_cast<T>(cfg.leaky_slope)), act2_(static_cast<T>(cfg.leaky_slope)),
      pool2_(13, 1, 1, 1, 6, 0), act3_(static_cast<T>(cfg.leaky_slope)),
      act4_(static_cast<T>(cfg.leaky_slope)), poly_act_(static_cast<T>(cfg.leaky_slope)) {
  cfg_.validate();
  const T p = static_cast<T>(cfg_.dropout);
  int prefilter_in = kHarmonics;
  if (cfg_.is_unet_family()) {
    unet_ = std::make_unique<UNetCore<T>>(cfg_, &state_, "unet");
    prefilter_in = cfg_.gamma;
  }
  conv1_ = std::make_unique<nn::Conv2d<T>>(prefilter_in, cfg_.n0, 15, 15, 1, 1, 7, 7, "prefilter");
  drop1_ = std::make_unique<nn::Dropout<T>>(p, &state_);
  if (cfg_.family == Family::DCNN || cfg_.family == Family::DRCNN) {
    for (int i = 0; i < 4; ++i) {
      replicas_.push_back(std::make_unique<nn::Conv2d<T>>(
          cfg_.n0, cfg_.n0, 15, 15, 1, 1, 7, 7, "prefilter_rep" + std::to_string(i + 1)));
      replica_act_.push_back(std::make_unique<nn::LeakyReLU<T>>(static_cast<T>(cfg_.leaky_slope)));
      replica_drop_.push_back(std::make_unique<nn::Dropout<T>>(p, &state_));
    }
  }
  conv2_ = std::make_unique<nn::Conv2d<T>>(cfg_.n0, cfg_.n1, 3, 3, 1, 3, 1, 0, "pitch_reduce");
  drop2_ = std::make_unique<nn::Dropout<T>>(p, &state_);
  conv3_ = std::make_unique<nn::Conv2d<T>>(cfg_.n1, cfg_.n2, kPatchFrames, 1, 1, 1, 0, 0,
                                           "time_reduce");
  drop3_ = std::make_unique<nn::Dropout<T>>(p, &state_);
  conv4a_ = std::make_unique<nn::Conv2d<T>>(cfg_.n2, cfg_.n3, 1, 1, 1, 1, 0, 0, "chan_reduce");
  drop4_ = std::make_unique<nn::Dropout<T>>(p, &state_);
  conv4b_ = std::make_unique<nn::Conv2d<T>>(cfg_.n3, 1, 1, 1, 1, 1, 0, 0, "output");
  if (cfg_.family == Family::PUnet) {
    const int bc = unet_->bottleneck_channels();
    poly1_ = std::make_unique<nn::Conv2d<T>>(bc, 64, 3, 3, 1, 1, 1, 1, "poly1");
    poly2_ = std::make_unique<nn::Conv2d<T>>(64, kPolyClasses, 1, 1, 1, 1, 0, 0, "poly2");
  }

  if (unet_) unet_->register_convs(convs_);
  convs_.push_back(conv1_.get());
  for (auto& r : replicas_) convs_.push_back(r.get());
  convs_.push_back(conv2_.get());
  convs_.push_back(conv3_.get());
  convs_.push_back(conv4a_.get());
  convs_.push_back(conv4b_.get());
  if (poly1_) {
    convs_.push_back(poly1_.get());
    convs_.push_back(poly2_.get());
  }
}

template <typename T>
void PitchNet<T>::init(uint64_t seed) {
  Rng rng(seed);
  if (unet_) unet_->init(rng);
  conv1_->init(rng);
  for (auto& r : replicas_) r->init(rng);
  conv2_->init(rng);
  conv3_->init(rng);
  conv4a_->init(rng);
  conv4b_->init(rng);
  if (poly1_) {
    poly1_->init(rng);
    poly2_->init(rng);
  }
  state_.seed = seed;
}

template <typename T>
ModelOut<T> PitchNet<T>::forward(const Tensor<T>& x) {
  MPE_CHECK(x.ndim() == 4, "input must be [B, 6, T, 216]");
  MPE_CHECK(x.dim(1) == kHarmonics && x.dim(3) == kBins,
            "input must be [B, 6, T, 216], got channels=" << x.dim(1) << " bins=" << x.dim(3));
  MPE_CHECK(x.dim(2) >= kPatchFrames, "input shorter than " << kPatchFrames << " frames");
  for (const T v : x.v) MPE_CHECK(std::isfinite(static_cast<double>(v)), "non-finite input value");

  Tensor<T> h = ln_.forward(x);
  if (unet_) h = unet_->forward(h);
  h = drop1_->forward(act1_.forward(conv1_->forward(h)));
  for (size_t i = 0; i < replicas_.size(); ++i) {
    Tensor<T> z = replica_drop_[i]->forward(replica_act_[i]->forward(replicas_[i]->forward(h)));
    if (cfg_.family == Family::DRCNN)
      for (int64_t j = 0; j < z.numel(); ++j) z.at(j) += h.at(j);
    h = std::move(z);
  }
  h = drop2_->forward(pool2_.forward(act2_.forward(conv2_->forward(h))));
  h = drop3_->forward(act3_.forward(conv3_->forward(h)));
  h = drop4_->forward(act4_.forward(conv4a_->forward(h)));
  h = sigmoid_.forward(conv4b_->forward(h));

  ModelOut<T> out;
  out_frames_ = h.dim(2);
  out.pitch = h.reshaped({h.dim(0), h.dim(2), h.dim(3)});
  if (poly1_) {
    const Tensor<T>& bott = unet_->bottleneck();
    Tensor<T> ph = poly_act_.forward(poly1_->forward(bott));
    poly_pre_pool_ = poly2_->forward(ph);
    poly_hw_ = {poly_pre_pool_.dim(2), poly_pre_pool_.dim(3)};
    const int64_t B = poly_pre_pool_.dim(0);
    Tensor<T> logits({B, kPolyClasses});
    const T denom = static_cast<T>(poly_hw_[0] * poly_hw_[1]);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < kPolyClasses; ++c) {
        T s = 0;
        for (int64_t i = 0; i < poly_hw_[0]; ++i)
          for (int64_t j = 0; j < poly_hw_[1]; ++j) s += poly_pre_pool_.at(b, c, i, j);
        logits.at(b, c) = s / denom;
      }
    out.poly_logits = std::move(logits);
  }
  return out;
}

template <typename T>
Tensor<T> PitchNet<T>::backward(const Tensor<T>& gpitch, const Tensor<T>& gpoly) {
  Tensor<T> g = gpitch.reshaped({gpitch.dim(0), 1, out_frames_, kPitches});
  g = conv4b_->backward(sigmoid_.backward(g));
  g = conv4a_->backward(act4_.backward(drop4_->backward(g)));
  g = conv3_->backward(act3_.backward(drop3_->backward(g)));
  g = conv2_->backward(act2_.backward(pool2_.backward(drop2_->backward(g))));
  for (size_t ri = replicas_.size(); ri > 0; --ri) {
    const size_t i = ri - 1;
    Tensor<T> gz =
        replicas_[i]->backward(replica_act_[i]->backward(replica_drop_[i]->backward(g)));
    if (cfg_.family == Family::DRCNN)
      for (int64_t j = 0; j < gz.numel(); ++j) gz.at(j) += g.at(j);
    g = std::move(gz);
  }
  g = conv1_->backward(act1_.backward(drop1_->backward(g)));

  if (unet_) {
    Tensor<T> gbott;
    if (poly1_ && gpoly.numel() > 0) {
      const int64_t B = gpoly.dim(0);
      Tensor<T> gpool({B, kPolyClasses, poly_hw_[0], poly_hw_[1]});
      const T denom = static_cast<T>(poly_hw_[0] * poly_hw_[1]);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < kPolyClasses; ++c) {
          const T gv = gpoly.at(b, c) / denom;
          for (int64_t i = 0; i < poly_hw_[0]; ++i)
            for (int64_t j = 0; j < poly_hw_[1]; ++j) gpool.at(b, c, i, j) = gv;
        }
      gbott = poly1_->backward(poly_act_.backward(poly2_->backward(gpool)));
      g = unet_->backward(g, &gbott);
    } else {
      g = unet_->backward(g, nullptr);
    }
  }
  return ln_.backward(g);
}

template <typename T>
void PitchNet<T>::set_training(bool training) {
  state_.training = training;
  for (auto* c : convs_) c->keep_state = training;
}

template <typename T>
std::vector<nn::Param<T>*> PitchNet<T>::params() {
  std::vector<nn::Param<T>*> out;
  ln_.collect_params(out);
  if (unet_) unet_->collect_params(out);
  conv1_->collect_params(out);
  for (auto& r : replicas_) r->collect_params(out);
  conv2_->collect_params(out);
  conv3_->collect_params(out);
  conv4a_->collect_params(out);
  conv4b_->collect_params(out);
  if (poly1_) {
    poly1_->collect_params(out);
    poly2_->collect_params(out);
  }
  return out;
}

template <typename T>
int64_t PitchNet<T>::count_params() {
  int64_t n = 0;
  for (auto* p : params()) n += p->numel();
  return n;
}

}  // namespace mpe
