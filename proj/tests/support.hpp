#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <spurank/spurank.hpp>

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
public:
    TempDir() {
        std::string tmpl = (fs::temp_directory_path() / "spurank_test_XXXXXX").string();
        if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

// Average ranks (1-based), ties share the mean position.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) { return pearson(average_ranks(a), average_ranks(b)); }

// Insertion sort: stable by construction, so ties keep input order. Input is
// pre-sorted by id, which makes the tie order id-ascending.
inline std::vector<std::string> insertion_rank(std::vector<std::pair<std::string, double>> items) {
    std::sort(items.begin(), items.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    for (std::size_t i = 1; i < items.size(); ++i) {
        auto key = items[i];
        std::size_t j = i;
        while (j > 0 && items[j - 1].second < key.second) {
            items[j] = items[j - 1];
            --j;
        }
        items[j] = key;
    }
    std::vector<std::string> out;
    for (auto& [id, s] : items) out.push_back(id);
    return out;
}

// Central-difference gradient of f at theta.
template <typename F>
std::vector<double> numeric_gradient(F&& f, std::vector<double> theta, double h) {
    std::vector<double> g(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double t = theta[i];
        theta[i] = t + h;
        const double fp = f(theta);
        theta[i] = t - h;
        const double fm = f(theta);
        theta[i] = t;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

// Direct evaluation of mean cross-entropy + (lambda/2)||W||^2, params [W, b].
inline double reference_objective(const std::vector<double>& theta, const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                                  std::size_t C, double lambda) {
    const std::size_t d = X.empty() ? 0 : X[0].size();
    double loss = 0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        std::vector<double> z(C);
        for (std::size_t c = 0; c < C; ++c) {
            z[c] = theta[C * d + c];
            for (std::size_t j = 0; j < d; ++j) z[c] += theta[c * d + j] * X[i][j];
        }
        const double mx = *std::max_element(z.begin(), z.end());
        double s = 0;
        for (double v : z) s += std::exp(v - mx);
        loss += -(z[static_cast<std::size_t>(y[i])] - mx - std::log(s));
    }
    double reg = 0;
    for (std::size_t k = 0; k < C * d; ++k) reg += theta[k] * theta[k];
    return loss / static_cast<double>(X.size()) + 0.5 * lambda * reg;
}

inline spurank::SyntheticConfig small_synthetic(std::uint64_t seed = 7) {
    spurank::SyntheticConfig c;
    c.num_classes = 3;
    c.per_class = 12;
    c.val_per_class = 6;
    c.ood_per_class = 4;
    c.ood_classes = 2;
    c.seed = seed;
    return c;
}

inline spurank::FeatureMatrix make_features(const std::vector<std::vector<double>>& X, const std::vector<int>& y) {
    spurank::FeatureMatrix fm;
    fm.d = X.empty() ? 0 : X[0].size();
    for (std::size_t i = 0; i < X.size(); ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "r%05zu", i);
        fm.image_ids.push_back(id);
        fm.labels.push_back(y[i]);
        for (double v : X[i]) fm.values.push_back(static_cast<float>(v));
    }
    return fm;
}

// Gaussian blobs with shared noise so classes overlap.
inline std::pair<std::vector<std::vector<double>>, std::vector<int>> random_problem(std::mt19937_64& rng, std::size_t n, std::size_t d,
                                                                                     int C, double spread) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> centers(static_cast<std::size_t>(C), std::vector<double>(d));
    for (auto& c : centers)
        for (auto& v : c) v = normal(rng) * spread;
    std::vector<std::vector<double>> X;
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % static_cast<std::size_t>(C));
        std::vector<double> x(d);
        for (std::size_t j = 0; j < d; ++j) x[j] = centers[static_cast<std::size_t>(label)][j] + normal(rng);
        X.push_back(std::move(x));
        y.push_back(label);
    }
    return {X, y};
}

}  // namespace testsupport
