#pragma once

#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "features.hpp"

namespace spurank {

struct TrainConfig {
    double l2_lambda = 1e-4;
    int max_iters = 1000;
    double tolerance = 1e-6;  // stop when the gradient 2-norm falls to this
    std::uint64_t seed = 0;
    double init_scale = 0.0;  // 0 = zero init; otherwise W, b ~ U[-s, s] from seed

    void validate() const {
        if (!(l2_lambda >= 0) || !std::isfinite(l2_lambda)) throw Error(ErrorKind::invalid_argument, "TrainConfig: l2_lambda must be >= 0");
        if (max_iters < 1) throw Error(ErrorKind::invalid_argument, "TrainConfig: max_iters must be >= 1");
        if (!(tolerance > 0)) throw Error(ErrorKind::invalid_argument, "TrainConfig: tolerance must be > 0");
        if (!(init_scale >= 0)) throw Error(ErrorKind::invalid_argument, "TrainConfig: init_scale must be >= 0");
    }
};

// stalled: the line search found no acceptable step.
enum class TrainStatus { converged, stalled, max_iters };

inline std::string_view to_string(TrainStatus s) {
    switch (s) {
        case TrainStatus::converged: return "converged";
        case TrainStatus::stalled: return "stalled";
        case TrainStatus::max_iters: return "max_iters";
    }
    return "max_iters";
}

inline TrainStatus parse_train_status(std::string_view s) {
    if (s == "converged") return TrainStatus::converged;
    if (s == "stalled") return TrainStatus::stalled;
    return TrainStatus::max_iters;
}

struct TrainStats {
    TrainStatus status = TrainStatus::max_iters;
    int iterations = 0;
    double objective = 0;
    double gradient_norm = 0;
    std::vector<double> objective_trace;  // objective after init and after each accepted step
};

/// Linear classification head: logits = W x + b over `class_ids` (ascending).
struct LinearHead {
    std::size_t d = 0;
    std::vector<int> class_ids;
    std::vector<float> W;  // C x d row-major
    std::vector<float> b;  // C
    std::string backbone_id;
    TrainConfig config;
    TrainStats stats;

    std::size_t num_classes() const { return class_ids.size(); }

    static LinearHead zeros(std::vector<int> class_ids, std::size_t d) {
        LinearHead h;
        h.d = d;
        h.class_ids = std::move(class_ids);
        h.W.assign(h.class_ids.size() * d, 0.0f);
        h.b.assign(h.class_ids.size(), 0.0f);
        return h;
    }
};

// ---------------------------------------------------------------------------
// Regularized softmax cross-entropy over a fixed design matrix. Parameters are
// packed as [W (C x d, row-major), b (C)].

class SoftmaxObjective {
public:
    SoftmaxObjective(const FeatureMatrix& fm, std::vector<int> class_ids, double l2_lambda)
        : n_(fm.rows()), d_(fm.d), classes_(std::move(class_ids)), lambda_(l2_lambda) {
        x_.resize(n_ * d_);
        for (std::size_t i = 0; i < x_.size(); ++i) x_[i] = fm.values[i];
        y_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            auto it = std::lower_bound(classes_.begin(), classes_.end(), fm.labels[i]);
            if (it == classes_.end() || *it != fm.labels[i])
                throw Error(ErrorKind::invalid_argument, "label " + std::to_string(fm.labels[i]) + " not among head classes");
            y_[i] = static_cast<std::size_t>(it - classes_.begin());
        }
    }

    std::size_t num_params() const { return classes_.size() * (d_ + 1); }
    std::size_t rows() const { return n_; }

    double value(std::span<const double> theta) const { return evaluate(theta, nullptr); }

    /// Objective value; fills `grad` (resized to num_params) with its gradient.
    double value_and_gradient(std::span<const double> theta, std::vector<double>& grad) const {
        grad.assign(num_params(), 0.0);
        return evaluate(theta, &grad);
    }

    /// f(theta + delta) - f(theta), evaluated from logit differences so that
    /// changes far below the rounding error of f itself stay resolvable.
    double change(std::span<const double> theta, std::span<const double> delta) const {
        const std::size_t C = classes_.size();
        const double* W = theta.data();
        const double* b = theta.data() + C * d_;
        const double* dW = delta.data();
        const double* db = delta.data() + C * d_;
        std::vector<double> logits(C), dz(C);
        double total = 0;
        for (std::size_t i = 0; i < n_; ++i) {
            const double* x = &x_[i * d_];
            double top = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < C; ++c) {
                double z = b[c], dzc = db[c];
                const double* w = W + c * d_;
                const double* dw = dW + c * d_;
                for (std::size_t k = 0; k < d_; ++k) {
                    z += w[k] * x[k];
                    dzc += dw[k] * x[k];
                }
                logits[c] = z;
                dz[c] = dzc;
                top = std::max(top, z);
            }
            double sum = 0, moved = 0;
            for (std::size_t c = 0; c < C; ++c) {
                const double e = std::exp(logits[c] - top);
                sum += e;
                moved += e * std::expm1(dz[c]);
            }
            total += std::log1p(moved / sum) - dz[y_[i]];
        }
        double reg = 0;
        for (std::size_t j = 0; j < C * d_; ++j) reg += dW[j] * (2.0 * W[j] + dW[j]);
        return total / static_cast<double>(n_) + 0.5 * lambda_ * reg;
    }

private:
    double evaluate(std::span<const double> theta, std::vector<double>* grad) const {
        const std::size_t C = classes_.size();
        const double* W = theta.data();
        const double* b = theta.data() + C * d_;
        std::vector<double> logits(C), prob(C);
        double loss = 0;
        for (std::size_t i = 0; i < n_; ++i) {
            const double* x = &x_[i * d_];
            double top = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < C; ++c) {
                double z = b[c];
                const double* w = W + c * d_;
                for (std::size_t k = 0; k < d_; ++k) z += w[k] * x[k];
                logits[c] = z;
                top = std::max(top, z);
            }
            double sum = 0;
            for (std::size_t c = 0; c < C; ++c) sum += (prob[c] = std::exp(logits[c] - top));
            const double log_sum = std::log(sum) + top;
            loss += log_sum - logits[y_[i]];
            if (grad) {
                for (std::size_t c = 0; c < C; ++c) {
                    const double r = prob[c] / sum - (c == y_[i] ? 1.0 : 0.0);
                    double* g = grad->data() + c * d_;
                    for (std::size_t k = 0; k < d_; ++k) g[k] += r * x[k];
                    (*grad)[C * d_ + c] += r;
                }
            }
        }
        const double inv_n = 1.0 / static_cast<double>(n_);
        double reg = 0;
        for (std::size_t j = 0; j < C * d_; ++j) reg += W[j] * W[j];
        if (grad) {
            for (std::size_t j = 0; j < grad->size(); ++j) (*grad)[j] *= inv_n;
            for (std::size_t j = 0; j < C * d_; ++j) (*grad)[j] += lambda_ * W[j];
        }
        return loss * inv_n + 0.5 * lambda_ * reg;
    }

    std::size_t n_, d_;
    std::vector<int> classes_;
    double lambda_;
    std::vector<double> x_;
    std::vector<std::size_t> y_;
};

inline double norm2(std::span<const double> v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// Fits a head from scratch by full-batch gradient descent with Armijo
/// backtracking (c1 = 1e-4, halving). The trial step is the Barzilai-Borwein
/// step from the previous iterate; the sufficient-decrease test uses
/// SoftmaxObjective::change. Rows are canonicalized by image_id, so the result
/// does not depend on row order.
inline LinearHead train_head(const FeatureMatrix& features, const TrainConfig& config,
                             std::optional<std::vector<int>> class_ids = std::nullopt) {
    config.validate();
    if (features.rows() == 0) throw Error(ErrorKind::invalid_argument, "train_head: no training rows");
    features.check();

    std::vector<int> classes;
    if (class_ids) {
        classes = *class_ids;
        std::sort(classes.begin(), classes.end());
        classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    } else {
        classes = features.labels;
        std::sort(classes.begin(), classes.end());
        classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    }
    if (classes.size() < 2) throw Error(ErrorKind::invalid_argument, "train_head: need at least 2 classes");
    for (int c : classes)
        if (std::find(features.labels.begin(), features.labels.end(), c) == features.labels.end())
            throw Error(ErrorKind::invalid_argument, "train_head: class " + std::to_string(c) + " has no samples");

    FeatureMatrix canonical = features.select(features.image_ids);
    if (canonical.rows() != features.rows()) throw Error(ErrorKind::invalid_argument, "train_head: duplicate image_id rows");

    const std::size_t C = classes.size(), d = features.d;
    SoftmaxObjective objective(canonical, classes, config.l2_lambda);

    std::vector<double> theta(objective.num_params(), 0.0);
    if (config.init_scale > 0) {
        auto rng = keyed_rng(config.seed, "head-init", "");
        for (auto& t : theta) t = (2.0 * unit_uniform(rng) - 1.0) * config.init_scale;
        // centered bias
        double mean = 0;
        for (std::size_t c = 0; c < C; ++c) mean += theta[C * d + c];
        mean /= static_cast<double>(C);
        for (std::size_t c = 0; c < C; ++c) theta[C * d + c] -= mean;
    }

    constexpr double c1 = 1e-4;
    constexpr int max_backtracks = 60;
    TrainStats stats;
    std::vector<double> grad, next(theta.size()), next_grad;
    double f = objective.value_and_gradient(theta, grad);
    if (!std::isfinite(f)) throw Error(ErrorKind::numeric, "train_head: non-finite initial objective");
    stats.objective_trace.push_back(f);
    double gnorm = norm2(grad);
    double step = 1.0;

    std::vector<double> delta(theta.size());
    int it = 0;
    bool stalled = false;
    while (gnorm > config.tolerance && it < config.max_iters) {
        const double g2 = gnorm * gnorm;
        double trial = step, df = 0;
        bool accepted = false;
        for (int bt = 0; bt < max_backtracks; ++bt) {
            for (std::size_t j = 0; j < theta.size(); ++j) {
                next[j] = theta[j] - trial * grad[j];
                delta[j] = next[j] - theta[j];
            }
            df = objective.change(theta, delta);
            if (std::isfinite(df) && df <= -c1 * trial * g2) {
                accepted = true;
                break;
            }
            trial *= 0.5;
        }
        if (!accepted) {
            stalled = true;
            break;
        }
        objective.value_and_gradient(next, next_grad);
        double sy = 0, ss = 0;
        for (std::size_t j = 0; j < theta.size(); ++j) {
            sy += delta[j] * (next_grad[j] - grad[j]);
            ss += delta[j] * delta[j];
        }
        step = sy > 0 ? std::clamp(ss / sy, 1e-10, 1e10) : trial * 2.0;
        theta.swap(next);
        grad.swap(next_grad);
        f += df;
        gnorm = norm2(grad);
        stats.objective_trace.push_back(f);
        ++it;
    }

    stats.iterations = it;
    stats.objective = f;
    stats.gradient_norm = gnorm;
    stats.status = gnorm <= config.tolerance ? TrainStatus::converged : stalled ? TrainStatus::stalled : TrainStatus::max_iters;

    LinearHead head = LinearHead::zeros(classes, d);
    for (std::size_t j = 0; j < C * d; ++j) head.W[j] = static_cast<float>(theta[j]);
    for (std::size_t c = 0; c < C; ++c) head.b[c] = static_cast<float>(theta[C * d + c]);
    for (float v : head.W)
        if (!std::isfinite(v)) throw Error(ErrorKind::numeric, "train_head: diverged to non-finite weights");
    head.config = config;
    head.stats = std::move(stats);
    return head;
}

// ---------------------------------------------------------------------------

struct Prediction {
    int class_id = 0;
    std::vector<double> probabilities;  // aligned with head.class_ids
    bool operator==(const Prediction&) const = default;
};

inline std::vector<double> head_logits(const LinearHead& head, std::span<const float> x) {
    if (x.size() != head.d) throw Error(ErrorKind::invalid_argument, "feature dimension " + std::to_string(x.size()) +
                                                                         " does not match head dimension " + std::to_string(head.d));
    std::vector<double> z(head.num_classes());
    for (std::size_t c = 0; c < z.size(); ++c) {
        double s = head.b[c];
        const float* w = &head.W[c * head.d];
        for (std::size_t k = 0; k < head.d; ++k) s += static_cast<double>(w[k]) * x[k];
        z[c] = s;
    }
    return z;
}

inline std::vector<double> softmax(std::span<const double> logits) {
    const double top = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0;
    for (std::size_t c = 0; c < p.size(); ++c) sum += (p[c] = std::exp(logits[c] - top));
    for (double& v : p) v /= sum;
    return p;
}

/// First index of the maximum over `allowed` entries (all when empty).
inline std::size_t argmax_index(std::span<const double> v, std::span<const bool> allowed = {}) {
    std::size_t best = v.size();
    for (std::size_t c = 0; c < v.size(); ++c) {
        if (!allowed.empty() && !allowed[c]) continue;
        if (best == v.size() || v[c] > v[best]) best = c;
    }
    if (best == v.size()) throw Error(ErrorKind::invalid_argument, "argmax over an empty class set");
    return best;
}

inline Prediction predict_row(const LinearHead& head, std::span<const float> x) {
    auto z = head_logits(head, x);
    Prediction p;
    p.probabilities = softmax(z);
    p.class_id = head.class_ids[argmax_index(p.probabilities)];
    return p;
}

inline std::vector<Prediction> predict(const LinearHead& head, const FeatureMatrix& features) {
    if (features.d != head.d) throw Error(ErrorKind::invalid_argument, "predict: feature dimension mismatch");
    std::vector<Prediction> out(features.rows());
    for (std::size_t i = 0; i < features.rows(); ++i) out[i] = predict_row(head, features.row(i));
    return out;
}

struct ClassAccuracy {
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct AccuracyReport {
    double accuracy = 0;
    std::size_t correct = 0;
    std::size_t total = 0;
    std::map<int, ClassAccuracy> per_class;  // only classes with rows
};

inline AccuracyReport accuracy_from_predictions(std::span<const int> predicted, std::span<const int> labels) {
    if (labels.empty()) throw Error(ErrorKind::invalid_argument, "evaluate_accuracy: no rows");
    AccuracyReport r;
    r.total = labels.size();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& pc = r.per_class[labels[i]];
        ++pc.total;
        if (predicted[i] == labels[i]) {
            ++pc.correct;
            ++r.correct;
        }
    }
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
    return r;
}

inline AccuracyReport evaluate_accuracy(const LinearHead& head, const FeatureMatrix& features) {
    if (features.rows() == 0) throw Error(ErrorKind::invalid_argument, "evaluate_accuracy: no rows");
    auto preds = predict(head, features);
    std::vector<int> predicted(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) predicted[i] = preds[i].class_id;
    return accuracy_from_predictions(predicted, features.labels);
}

// ---------------------------------------------------------------------------
// Head file: "SPRKHEAD", u32 version, u32 header length, JSON header
// {C, d, class_ids, backbone_id, train_config, ...}, then W and b as
// little-endian float32.

inline constexpr char kHeadMagic[8] = {'S', 'P', 'R', 'K', 'H', 'E', 'A', 'D'};

inline std::string serialize_head(const LinearHead& h) {
    nlohmann::ordered_json header{
        {"C", h.num_classes()},
        {"d", h.d},
        {"class_ids", h.class_ids},
        {"backbone_id", h.backbone_id},
        {"train_config",
         {{"l2_lambda", h.config.l2_lambda}, {"max_iters", h.config.max_iters}, {"tolerance", h.config.tolerance},
          {"seed", h.config.seed}, {"init_scale", h.config.init_scale}, {"step_rule", "gd-armijo-bb"}}},
        {"iterations", h.stats.iterations},
        {"objective", h.stats.objective},
        {"gradient_norm", h.stats.gradient_norm},
        {"status", std::string(to_string(h.stats.status))}};
    const std::string text = header.dump();
    std::string out(kHeadMagic, 8);
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (float v : h.W) detail::put_f32(out, v);
    for (float v : h.b) detail::put_f32(out, v);
    return out;
}

inline LinearHead parse_head(std::string_view bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kHeadMagic, 8) != 0) throw Error(ErrorKind::parse, "not a head file");
    if (detail::get_u32(bytes, 8) != 1) throw Error(ErrorKind::parse, "unsupported head file version");
    const std::size_t len = detail::get_u32(bytes, 12);
    if (bytes.size() < 16 + len) throw Error(ErrorKind::parse, "truncated head header");
    LinearHead h;
    try {
        auto j = nlohmann::json::parse(bytes.substr(16, len));
        h.d = j.at("d").get<std::size_t>();
        h.class_ids = j.at("class_ids").get<std::vector<int>>();
        h.backbone_id = j.at("backbone_id").get<std::string>();
        const auto& tc = j.at("train_config");
        h.config.l2_lambda = tc.at("l2_lambda").get<double>();
        h.config.max_iters = tc.at("max_iters").get<int>();
        h.config.tolerance = tc.at("tolerance").get<double>();
        h.config.seed = tc.at("seed").get<std::uint64_t>();
        h.config.init_scale = tc.value("init_scale", 0.0);
        h.stats.iterations = j.value("iterations", 0);
        h.stats.objective = j.value("objective", 0.0);
        h.stats.gradient_norm = j.value("gradient_norm", 0.0);
        h.stats.status = parse_train_status(j.value("status", std::string("max_iters")));
        if (j.at("C").get<std::size_t>() != h.class_ids.size()) throw Error(ErrorKind::parse, "head C disagrees with class_ids");
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, std::string("head header: ") + e.what());
    }
    const std::size_t C = h.class_ids.size();
    const std::size_t payload = 16 + len;
    if (bytes.size() != payload + (C * h.d + C) * 4) throw Error(ErrorKind::parse, "head payload size mismatch");
    h.W.resize(C * h.d);
    h.b.resize(C);
    for (std::size_t j = 0; j < h.W.size(); ++j) h.W[j] = detail::get_f32(bytes, payload + 4 * j);
    for (std::size_t c = 0; c < C; ++c) h.b[c] = detail::get_f32(bytes, payload + 4 * (h.W.size() + c));
    return h;
}

inline void write_head(const fs::path& path, const LinearHead& h) { write_file_atomic(path, serialize_head(h)); }
inline LinearHead read_head(const fs::path& path) { return parse_head(read_file(path)); }

}  // namespace spurank
