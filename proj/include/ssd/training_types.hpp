#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ssd/errors.hpp"
#include "ssd/networks.hpp"

namespace ssd {

/// Hyperparameters and ablation switches for one training run.
struct TrainConfig {
  double lr = 5e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  bool spectral_norm = true;
  GeneratorMode generator_mode = GeneratorMode::adain;
  int data_fraction = 100;
  std::size_t val_noise_count = 500;
  ChannelPlan generator_channels = kGeneratorChannels;
  ChannelPlan discriminator_channels = kDiscriminatorChannels;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm needs statistics)");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(data_fraction == 25 || data_fraction == 50 || data_fraction == 75 ||
          data_fraction == 100))
      throw ConfigError("data_fraction must be one of 25, 50, 75, 100");
    if (val_noise_count < 1) throw ConfigError("val_noise_count must be >= 1");
    if (generator_mode == GeneratorMode::none)
      throw ConfigError("generator_mode none is a parameter-count control, not a training mode");
    if (generator_channels.size() != discriminator_channels.size())
      throw ConfigError("generator and discriminator channel plans must have equal depth");
    if (generator_channels.back() != discriminator_channels.front())
      throw ConfigError("generator output channels must match discriminator input channels");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// One alternation step: a discriminator update followed by a generator
/// update on the same batch slot.
struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double d_loss = 0.0;
  double g_loss = 0.0;
  double d_real_prob = 0.0;
  double d_fake_prob = 0.0;
  double g_grad_norm = 0.0;
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double val_loss = 0.0;
  bool improved = false;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

}  // namespace ssd
