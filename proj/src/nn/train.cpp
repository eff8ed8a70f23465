#include "qsm/nn/train.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "qsm/error.hpp"

namespace qsm::nn {
namespace {

struct Sample {
  std::vector<double> field, mask, target;
};

double masked_rms(const Volume& field, const Mask& mask) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (!mask[i]) continue;
    acc += field[i] * field[i];
    ++n;
  }
  return n ? std::sqrt(acc / static_cast<double>(n)) : 0.0;
}

double field_scale(const Volume& field, const Mask& mask) {
  const double rms = masked_rms(field, mask);
  return rms > 0.0 ? rms : 1.0;
}

Sample prepare(const Volume& field, const Mask& mask, const Volume* chi) {
  require_same_dims(field.dims(), mask.dims(), "network input");
  const double s = field_scale(field, mask);
  Sample out;
  out.field.resize(field.size());
  out.mask.resize(field.size());
  if (chi) out.target.resize(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double m = mask[i] ? 1.0 : 0.0;
    out.mask[i] = m;
    out.field[i] = m * field[i] / s;
    if (chi) out.target[i] = m * (*chi)[i] / s;
  }
  return out;
}

Shape5 batch_shape(std::size_t n, const Dims& d) { return {n, 1, d.nz, d.ny, d.nx}; }

Tensor stack(const std::vector<const Sample*>& batch, std::vector<double> Sample::*member, const Dims& d) {
  std::vector<double> v;
  v.reserve(batch.size() * d.nx * d.ny * d.nz);
  for (const Sample* s : batch) v.insert(v.end(), (s->*member).begin(), (s->*member).end());
  return Tensor::constant(batch_shape(batch.size(), d), std::move(v));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Explicit Fisher-Yates so the order does not depend on the standard library's shuffle.
  std::mt19937_64 rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

nlohmann::json train_state(const TrainConfig& cfg, const TrainLog& log, std::size_t dataset_size) {
  return {{"epoch", log.epochs_completed},
          {"seed", cfg.seed},
          {"batch", cfg.batch},
          {"dataset_size", dataset_size},
          {"step_loss", log.step_loss},
          {"epoch_loss", log.epoch_loss}};
}

}  // namespace

void TrainConfig::validate() const {
  net.validate();
  optimizer.validate();
  if (epochs < 0) fail(ErrorCode::invalid_argument, "epochs must be >= 0");
  if (batch < 1) fail(ErrorCode::invalid_argument, "batch must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"net", net.to_json()}, {"optimizer", optimizer.to_json()}, {"epochs", epochs},
          {"batch", batch},       {"seed", seed}};
}

nlohmann::json TrainLog::to_json() const {
  return {{"step_loss", step_loss},
          {"epoch_loss", epoch_loss},
          {"epochs_completed", epochs_completed},
          {"resumed_from_epoch", resumed_from_epoch}};
}

TrainResult train(const TrainConfig& cfg, const std::vector<PhantomPair>& data,
                  const std::optional<std::filesystem::path>& checkpoint_path, bool resume) {
  cfg.validate();
  if (cfg.epochs > 0 && data.empty()) fail(ErrorCode::invalid_argument, "training set is empty");
  std::vector<Sample> samples;
  samples.reserve(data.size());
  Dims dims{};
  for (const auto& p : data) {
    if (samples.empty()) dims = p.local_field.dims();
    require_same_dims(dims, p.local_field.dims(), "training pairs");
    require_same_dims(dims, p.chi_true.dims(), "training pairs");
    cfg.net.require_divisible(dims.nz, dims.ny, dims.nx);
    samples.push_back(prepare(p.local_field, p.mask, &p.chi_true));
  }

  TrainResult result{init_params(cfg.net, cfg.seed), {}};
  if (resume) {
    if (!checkpoint_path) fail(ErrorCode::invalid_argument, "resume requested without a checkpoint path");
    Checkpoint ck = load_checkpoint(*checkpoint_path);
    const auto& st = ck.state;
    if (!(ck.net == cfg.net) || !(ck.optimizer == cfg.optimizer) || st.value("seed", ~std::uint64_t{0}) != cfg.seed ||
        st.value("batch", -1) != cfg.batch || st.value("dataset_size", std::size_t{0}) != data.size()) {
      fail(ErrorCode::checkpoint_mismatch, "checkpoint " + checkpoint_path->string() +
                                               " was written by a different training configuration");
    }
    result.params = std::move(ck.params);
    result.log.epochs_completed = st.value("epoch", 0);
    result.log.step_loss = st.value("step_loss", std::vector<double>{});
    result.log.epoch_loss = st.value("epoch_loss", std::vector<double>{});
    result.log.resumed_from_epoch = result.log.epochs_completed;
  }

  ParamStore& params = result.params;
  TrainLog& log = result.log;
  const std::size_t b = static_cast<std::size_t>(cfg.batch);
  for (int epoch = log.epochs_completed; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(samples.size(), cfg.seed, epoch);
    double epoch_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += b) {
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + b); ++i) batch.push_back(&samples[order[i]]);
      params.zero_grad();
      const Tensor field = stack(batch, &Sample::field, dims);
      const Tensor mask = stack(batch, &Sample::mask, dims);
      const Tensor target = stack(batch, &Sample::target, dims);
      const Tensor loss = l1_loss(forward_net(cfg.net, params, field, mask), target, mask);
      if (!std::isfinite(loss.item())) {
        fail(ErrorCode::non_finite, "non-finite training loss at step " + std::to_string(params.step) +
                                        "; last good checkpoint is from epoch " +
                                        std::to_string(log.epochs_completed));
      }
      backward(loss);
      rmsprop_step(params, cfg.optimizer);
      log.step_loss.push_back(loss.item());
      epoch_sum += loss.item();
      ++steps;
    }
    params.zero_grad();
    log.epoch_loss.push_back(steps ? epoch_sum / static_cast<double>(steps) : 0.0);
    log.epochs_completed = epoch + 1;
    if (checkpoint_path) {
      save_checkpoint(Checkpoint{cfg.net, cfg.optimizer, params, train_state(cfg, log, data.size())},
                      *checkpoint_path);
    }
  }
  if (checkpoint_path && cfg.epochs == 0 && !resume) {
    save_checkpoint(Checkpoint{cfg.net, cfg.optimizer, params, train_state(cfg, log, data.size())}, *checkpoint_path);
  }
  return result;
}

double sample_loss(const NetConfig& cfg, const ParamStore& params, const PhantomPair& pair) {
  const Sample s = prepare(pair.local_field, pair.mask, &pair.chi_true);
  const Dims d = pair.local_field.dims();
  const Tensor field = Tensor::constant(batch_shape(1, d), s.field);
  const Tensor mask = Tensor::constant(batch_shape(1, d), s.mask);
  const Tensor target = Tensor::constant(batch_shape(1, d), s.target);
  return l1_loss(forward_net(cfg, params, field, mask), target, mask).item();
}

Volume infer(const NetConfig& cfg, const ParamStore& params, const Volume& field, const Mask& mask) {
  const Dims d = field.dims();
  cfg.require_divisible(d.nz, d.ny, d.nx);
  require_finite(field.data(), "network input field");
  // The network is applied in units of the field's masked RMS; a field with
  // no energy in the mask therefore maps to exactly zero.
  const double s = masked_rms(field, mask);
  const Sample smp = prepare(field, mask, nullptr);
  const Tensor out = forward_net(cfg, params, Tensor::constant(batch_shape(1, d), smp.field),
                                 Tensor::constant(batch_shape(1, d), smp.mask));
  Volume chi = Volume::zeros(field.grid(), Unit::ppm);
  for (std::size_t i = 0; i < chi.size(); ++i) chi[i] = mask[i] ? s * out.value()[i] : 0.0;
  chi.set_b0(field.b0());
  return chi;
}

}  // namespace qsm::nn
