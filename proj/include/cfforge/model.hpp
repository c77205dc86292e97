#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfforge/rng.hpp"
#include "cfforge/schema.hpp"

namespace cfforge {

struct SingleClassDataset : std::runtime_error {
  SingleClassDataset() : std::runtime_error("training data has a single class") {}
};

inline std::uint64_t schema_hash(const FeatureSchema& schema) {
  std::string s = schema_to_json(schema).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::size_t encoded_dimension(const FeatureSchema& schema) {
  std::size_t d = 0;
  for (const auto& f : schema.features) {
    d += f.type == FeatureType::continuous ? 1 : f.allowed_codes.size();
  }
  return d;
}

// Continuous: min-max scaled by training ranges, clipped to [-0.5, 1.5].
// Categorical: one-hot over the training-allowed values; a category unseen in
// training encodes as an all-zeros block and raises the flag.
inline std::vector<double> encode(const Sample& sample, const FeatureSchema& schema,
                                  bool* unknown_category = nullptr) {
  if (sample.values.size() != schema.dimension()) {
    throw std::invalid_argument("encode: sample does not match schema dimension");
  }
  std::vector<double> x;
  x.reserve(encoded_dimension(schema));
  bool unknown = false;
  for (std::size_t i = 0; i < schema.features.size(); ++i) {
    const FeatureSpec& f = schema.features[i];
    if (f.type == FeatureType::continuous) {
      double r = f.range();
      double scaled = r > 0 ? (num(sample.values[i]) - *f.observed_min) / r : 0.5;
      x.push_back(std::clamp(scaled, -0.5, 1.5));
    } else {
      int code = cat(sample.values[i]);
      auto pos = std::find(f.allowed_codes.begin(), f.allowed_codes.end(), code);
      std::size_t block = x.size();
      x.resize(block + f.allowed_codes.size(), 0.0);
      if (pos == f.allowed_codes.end()) {
        unknown = true;
      } else {
        x[block + static_cast<std::size_t>(pos - f.allowed_codes.begin())] = 1.0;
      }
    }
  }
  if (unknown_category) *unknown_category = unknown;
  return x;
}

struct Hyperparams {
  double learning_rate = 1e-3;
  int epochs = 100;
  int batch_size = 32;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::vector<int> hidden = {32, 16};
};

struct Prediction {
  int label = 0;
  double probability = 0.0;
};

struct Gradients {
  std::vector<std::vector<double>> dW, db;
};

namespace detail {
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
inline double bce(double p, int y) {
  p = std::clamp(p, 1e-12, 1.0 - 1e-12);
  return y == 1 ? -std::log(p) : -std::log(1.0 - p);
}

// Training order must not depend on the caller's sample order, so samples are
// canonicalized before the seed-driven shuffles.
inline std::string canonical_key(const Sample& s, const FeatureSchema& schema) {
  std::string k = s.patient_id;
  k += '|';
  k += std::to_string(s.window_index);
  k += '|';
  k += std::to_string(s.label);
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    k += '|';
    if (schema.features[i].type == FeatureType::continuous) {
      k += format_double(num(s.values[i]));
    } else {
      k += schema.features[i].categories.at(static_cast<std::size_t>(cat(s.values[i])));
    }
  }
  return k;
}
}  // namespace detail

// Feed-forward binary classifier: ReLU hidden layers, sigmoid output, trained
// with mini-batch Adam on binary cross-entropy. All randomness (init order,
// batch shuffles) derives from the seed alone.
class Classifier {
 public:
  static Classifier train(const Dataset& data, const Hyperparams& hp, std::uint64_t seed) {
    if (data.samples.empty()) throw EmptyDataset();
    if (data.class_count(0) == 0 || data.class_count(1) == 0) throw SingleClassDataset();

    Classifier c;
    c.schema_ = data.schema;
    c.seed_ = seed;
    const int d = static_cast<int>(encoded_dimension(data.schema));
    c.sizes_ = {d};
    for (int h : hp.hidden) c.sizes_.push_back(h);
    c.sizes_.push_back(1);

    std::mt19937_64 gen(seed);
    c.init_glorot(gen);

    std::vector<std::pair<std::string, const Sample*>> keyed;
    keyed.reserve(data.samples.size());
    for (const auto& s : data.samples) keyed.emplace_back(detail::canonical_key(s, data.schema), &s);
    std::stable_sort(keyed.begin(), keyed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });

    const std::size_t n = keyed.size();
    std::vector<std::vector<double>> X(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      X[i] = encode(*keyed[i].second, data.schema);
      y[i] = keyed[i].second->label;
    }

    const std::size_t layers = c.W_.size();
    std::vector<std::vector<double>> mW(layers), vW(layers), mB(layers), vB(layers), gW(layers),
        gB(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      mW[l].assign(c.W_[l].size(), 0.0);
      vW[l].assign(c.W_[l].size(), 0.0);
      gW[l].assign(c.W_[l].size(), 0.0);
      mB[l].assign(c.b_[l].size(), 0.0);
      vB[l].assign(c.b_[l].size(), 0.0);
      gB[l].assign(c.b_[l].size(), 0.0);
    }

    auto dataset_loss = [&]() {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += detail::bce(c.probability_encoded(X[i]), y[i]);
      return s / static_cast<double>(n);
    };
    c.initial_loss_ = dataset_loss();

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<std::vector<double>> a, zs;
    long t = 0;
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
      seeded_shuffle(idx, gen);
      for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(hp.batch_size)) {
        std::size_t batch_end = std::min(n, at + static_cast<std::size_t>(hp.batch_size));
        double inv = 1.0 / static_cast<double>(batch_end - at);
        for (std::size_t l = 0; l < layers; ++l) {
          std::fill(gW[l].begin(), gW[l].end(), 0.0);
          std::fill(gB[l].begin(), gB[l].end(), 0.0);
        }
        for (std::size_t k = at; k < batch_end; ++k) {
          c.forward(X[idx[k]], a, zs);
          c.accumulate_gradients(a, zs, y[idx[k]], gW, gB);
        }
        ++t;
        double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
        for (std::size_t l = 0; l < layers; ++l) {
          auto adam = [&](std::vector<double>& w, std::vector<double>& m, std::vector<double>& v,
                          const std::vector<double>& g) {
            for (std::size_t i = 0; i < w.size(); ++i) {
              double gi = g[i] * inv;
              m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
              v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
              w[i] -= hp.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + hp.adam_eps);
            }
          };
          adam(c.W_[l], mW[l], vW[l], gW[l]);
          adam(c.b_[l], mB[l], vB[l], gB[l]);
        }
      }
      c.loss_history_.push_back(dataset_loss());
    }
    c.final_loss_ = c.loss_history_.empty() ? c.initial_loss_ : c.loss_history_.back();
    return c;
  }

  // Hand-assembled model (e.g. a plain logistic boundary) for tests and
  // tooling; weight matrices are row-major [out x in] flattened.
  static Classifier from_parts(FeatureSchema schema, std::vector<std::vector<double>> W,
                               std::vector<std::vector<double>> b) {
    if (W.empty() || W.size() != b.size()) {
      throw std::invalid_argument("from_parts: need matching weight/bias layers");
    }
    Classifier c;
    c.schema_ = std::move(schema);
    c.sizes_ = {static_cast<int>(encoded_dimension(c.schema_))};
    for (std::size_t l = 0; l < W.size(); ++l) {
      std::size_t rows = b[l].size();
      if (rows == 0 || W[l].size() != rows * static_cast<std::size_t>(c.sizes_.back())) {
        throw std::invalid_argument("from_parts: layer shape mismatch");
      }
      c.sizes_.push_back(static_cast<int>(rows));
    }
    if (c.sizes_.back() != 1) throw std::invalid_argument("from_parts: output layer must be 1-wide");
    c.W_ = std::move(W);
    c.b_ = std::move(b);
    return c;
  }

  double probability_encoded(const std::vector<double>& x) const {
    std::vector<double> cur = x;
    std::vector<double> next;
    for (std::size_t l = 0; l < W_.size(); ++l) {
      const std::size_t in = static_cast<std::size_t>(sizes_[l]);
      const std::size_t out = static_cast<std::size_t>(sizes_[l + 1]);
      next.assign(out, 0.0);
      for (std::size_t j = 0; j < out; ++j) {
        double z = b_[l][j];
        const double* row = W_[l].data() + j * in;
        for (std::size_t i = 0; i < in; ++i) z += row[i] * cur[i];
        next[j] = l + 1 < W_.size() ? (z > 0 ? z : 0.0) : detail::sigmoid(z);
      }
      cur.swap(next);
    }
    return cur[0];
  }

  Prediction predict(const Sample& sample) const {
    double p = probability_encoded(encode(sample, schema_));
    return {p >= 0.5 ? 1 : 0, p};
  }

  double loss_encoded(const std::vector<double>& x, int y) const {
    return detail::bce(probability_encoded(x), y);
  }

  Gradients backprop(const std::vector<double>& x, int y) const {
    std::vector<std::vector<double>> a, zs;
    forward(x, a, zs);
    Gradients g;
    g.dW.resize(W_.size());
    g.db.resize(W_.size());
    for (std::size_t l = 0; l < W_.size(); ++l) {
      g.dW[l].assign(W_[l].size(), 0.0);
      g.db[l].assign(b_[l].size(), 0.0);
    }
    accumulate_gradients(a, zs, y, g.dW, g.db);
    return g;
  }

  const FeatureSchema& schema() const { return schema_; }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  const std::vector<std::vector<double>>& weights() const { return W_; }
  const std::vector<std::vector<double>>& biases() const { return b_; }
  std::uint64_t seed() const { return seed_; }
  double initial_loss() const { return initial_loss_; }
  double final_loss() const { return final_loss_; }
  const std::vector<double>& loss_history() const { return loss_history_; }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < W_.size(); ++l) n += W_[l].size() + b_[l].size();
    return n;
  }

  double get_param(std::size_t flat) const { return *param_ptr(const_cast<Classifier&>(*this), flat); }
  void set_param(std::size_t flat, double v) { *param_ptr(*this, flat) = v; }

  json to_json() const {
    json j;
    j["layer_sizes"] = sizes_;
    j["weights"] = W_;
    j["biases"] = b_;
    j["schema"] = schema_to_json(schema_);
    j["schema_hash"] = schema_hash(schema_);
    j["seed"] = seed_;
    j["initial_loss"] = initial_loss_;
    j["final_loss"] = final_loss_;
    return j;
  }

  static Classifier from_json(const json& j) {
    Classifier c;
    c.schema_ = schema_from_json(j.at("schema"));
    if (j.contains("schema_hash") &&
        j["schema_hash"].get<std::uint64_t>() != schema_hash(c.schema_)) {
      throw std::runtime_error("model file schema hash mismatch");
    }
    c.sizes_ = j.at("layer_sizes").get<std::vector<int>>();
    c.W_ = j.at("weights").get<std::vector<std::vector<double>>>();
    c.b_ = j.at("biases").get<std::vector<std::vector<double>>>();
    c.seed_ = j.value("seed", 0ull);
    c.initial_loss_ = j.value("initial_loss", 0.0);
    c.final_loss_ = j.value("final_loss", 0.0);
    if (c.sizes_.size() != c.W_.size() + 1 || c.W_.size() != c.b_.size()) {
      throw std::runtime_error("model file layer shape mismatch");
    }
    if (c.sizes_.front() != static_cast<int>(encoded_dimension(c.schema_))) {
      throw std::runtime_error("model input width does not match schema");
    }
    for (std::size_t l = 0; l < c.W_.size(); ++l) {
      if (c.b_[l].size() != static_cast<std::size_t>(c.sizes_[l + 1]) ||
          c.W_[l].size() != static_cast<std::size_t>(c.sizes_[l]) * c.b_[l].size()) {
        throw std::runtime_error("model file layer shape mismatch");
      }
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_json().dump(2) << '\n';
  }

  static Classifier load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return from_json(json::parse(in));
  }

  bool operator==(const Classifier& o) const {
    return sizes_ == o.sizes_ && W_ == o.W_ && b_ == o.b_ && schema_ == o.schema_;
  }

 private:
  FeatureSchema schema_;
  std::vector<int> sizes_;
  std::vector<std::vector<double>> W_, b_;
  std::uint64_t seed_ = 0;
  double initial_loss_ = 0, final_loss_ = 0;
  std::vector<double> loss_history_;

  void init_glorot(std::mt19937_64& gen) {
    W_.clear();
    b_.clear();
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      std::size_t in = static_cast<std::size_t>(sizes_[l]);
      std::size_t out = static_cast<std::size_t>(sizes_[l + 1]);
      double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      std::vector<double> w(in * out);
      for (double& v : w) v = uniform(gen, -limit, limit);
      W_.push_back(std::move(w));
      b_.push_back(std::vector<double>(out, 0.0));
    }
  }

  // a[0..L] activations, zs[0..L-1] pre-activations.
  void forward(const std::vector<double>& x, std::vector<std::vector<double>>& a,
               std::vector<std::vector<double>>& zs) const {
    const std::size_t L = W_.size();
    a.assign(L + 1, {});
    zs.assign(L, {});
    a[0] = x;
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t in = static_cast<std::size_t>(sizes_[l]);
      const std::size_t out = static_cast<std::size_t>(sizes_[l + 1]);
      zs[l].assign(out, 0.0);
      a[l + 1].assign(out, 0.0);
      for (std::size_t j = 0; j < out; ++j) {
        double z = b_[l][j];
        const double* row = W_[l].data() + j * in;
        for (std::size_t i = 0; i < in; ++i) z += row[i] * a[l][i];
        zs[l][j] = z;
        a[l + 1][j] = l + 1 < L ? (z > 0 ? z : 0.0) : detail::sigmoid(z);
      }
    }
  }

  // dL/dz at the sigmoid output is p - y; ReLU derivative is 0 at 0.
  void accumulate_gradients(const std::vector<std::vector<double>>& a,
                            const std::vector<std::vector<double>>& zs, int y,
                            std::vector<std::vector<double>>& gW,
                            std::vector<std::vector<double>>& gB) const {
    const std::size_t L = W_.size();
    std::vector<double> delta = {a[L][0] - static_cast<double>(y)};
    for (std::size_t li = L; li-- > 0;) {
      const std::size_t in = static_cast<std::size_t>(sizes_[li]);
      const std::size_t out = static_cast<std::size_t>(sizes_[li + 1]);
      for (std::size_t j = 0; j < out; ++j) {
        gB[li][j] += delta[j];
        double* grow = gW[li].data() + j * in;
        for (std::size_t i = 0; i < in; ++i) grow[i] += delta[j] * a[li][i];
      }
      if (li == 0) break;
      std::vector<double> prev(in, 0.0);
      for (std::size_t i = 0; i < in; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < out; ++j) s += W_[li][j * in + i] * delta[j];
        prev[i] = zs[li - 1][i] > 0 ? s : 0.0;
      }
      delta.swap(prev);
    }
  }

  static double* param_ptr(Classifier& c, std::size_t flat) {
    for (std::size_t l = 0; l < c.W_.size(); ++l) {
      if (flat < c.W_[l].size()) return &c.W_[l][flat];
      flat -= c.W_[l].size();
      if (flat < c.b_[l].size()) return &c.b_[l][flat];
      flat -= c.b_[l].size();
    }
    throw std::out_of_range("parameter index");
  }
};

// Max relative error between backprop and central finite differences over a
// seed-chosen subset of parameters.
inline double gradient_check(const Classifier& model, const Sample& sample, std::uint64_t seed,
                             std::size_t param_count = 120) {
  const std::vector<double> x = encode(sample, model.schema());
  const int y = sample.label;
  Gradients g = model.backprop(x, y);
  std::vector<double> flat;
  for (std::size_t l = 0; l < g.dW.size(); ++l) {
    flat.insert(flat.end(), g.dW[l].begin(), g.dW[l].end());
    flat.insert(flat.end(), g.db[l].begin(), g.db[l].end());
  }

  std::vector<std::size_t> idx(model.total_params());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 gen(seed);
  seeded_shuffle(idx, gen);
  const std::size_t count = std::min(param_count, idx.size());

  Classifier probe = model;
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t p = idx[k];
    double orig = probe.get_param(p);
    probe.set_param(p, orig + h);
    double up = probe.loss_encoded(x, y);
    probe.set_param(p, orig - h);
    double down = probe.loss_encoded(x, y);
    probe.set_param(p, orig);
    double fd = (up - down) / (2 * h);
    double rel = std::fabs(fd - flat[p]) / std::max(1e-6, std::fabs(fd) + std::fabs(flat[p]));
    worst = std::max(worst, rel);
  }
  return worst;
}

struct ClassificationReport {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, auc = 0;
  std::vector<std::string> undefined;  // metrics that were forced to 0

  bool flagged(std::string_view metric) const {
    return std::find(undefined.begin(), undefined.end(), metric) != undefined.end();
  }

  json to_json() const {
    json j;
    j["accuracy"] = accuracy;
    j["precision"] = precision;
    j["recall"] = recall;
    j["f1"] = f1;
    j["auc"] = auc;
    j["undefined"] = undefined;
    return j;
  }
};

// Exact pairwise Mann-Whitney statistic; ties count one half.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                           bool* undefined = nullptr) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  if (undefined) *undefined = pairs == 0;
  return pairs == 0 ? 0.0 : wins / static_cast<double>(pairs);
}

// Positive class is 1 throughout; a metric with an empty denominator is
// reported as 0 and listed in `undefined`.
inline ClassificationReport evaluate(const Classifier& model, const Dataset& test) {
  if (test.samples.empty()) throw EmptyDataset();
  ClassificationReport r;
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(test.samples.size());
  for (const auto& s : test.samples) {
    Prediction p = model.predict(s);
    scores.push_back(p.probability);
    labels.push_back(s.label);
    if (p.label == 1 && s.label == 1) ++tp;
    else if (p.label == 1 && s.label == 0) ++fp;
    else if (p.label == 0 && s.label == 1) ++fn;
    else ++tn;
  }
  const double n = static_cast<double>(test.samples.size());
  r.accuracy = static_cast<double>(tp + tn) / n;
  if (tp + fp > 0) {
    r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  } else {
    r.undefined.push_back("precision");
  }
  if (tp + fn > 0) {
    r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  } else {
    r.undefined.push_back("recall");
  }
  if (r.precision + r.recall > 0) {
    r.f1 = 2 * r.precision * r.recall / (r.precision + r.recall);
  } else {
    r.undefined.push_back("f1");
  }
  bool auc_undef = false;
  r.auc = pairwise_auc(scores, labels, &auc_undef);
  if (auc_undef) r.undefined.push_back("auc");
  return r;
}

}  // namespace cfforge
