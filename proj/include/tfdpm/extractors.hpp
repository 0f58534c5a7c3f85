#pragma once

#include "tfdpm/autodiff.hpp"
#include "tfdpm/common.hpp"
#include "tfdpm/dataset.hpp"
#include "tfdpm/gat.hpp"

#include <memory>
#include <string>
#include <vector>

namespace tfdpm {

enum class ExtractorKind { Gru, DoubleGat, TcnGat };

ExtractorKind parse_extractor_kind(const std::string& name);
std::string extractor_kind_name(ExtractorKind kind);

struct ExtractorConfig {
    ExtractorKind kind = ExtractorKind::TcnGat;
    Eigen::Index data_dim = 0;      // D (after one-hot expansion)
    Eigen::Index window = 12;       // omega
    Eigen::Index hidden_size = 64;  // dimension of F_t
    double leaky_slope = 0.2;

    static constexpr int kSmoothKernel = 5;
    static constexpr int kTcnKernels[3] = {3, 5, 7};
};

/// Condition vector for one time step.
struct FeatureState {
    Vector vector;
    Eigen::Index time_index = 0;
};

/// Single-layer gated recurrent cell.
class GruCell {
public:
    GruCell(const std::string& name, Eigen::Index input, Eigen::Index hidden, Rng& rng);

    nn::Var step(nn::Graph& g, nn::Var x, nn::Var h);
    /// Runs over a sample-major stacked sequence ((B·steps)×I) and returns
    /// the final hidden state, B×H.
    nn::Var run(nn::Graph& g, nn::Var seq, Eigen::Index batch, Eigen::Index steps);

    Eigen::Index hidden() const { return wz_.value.rows(); }
    void collect_params(std::vector<nn::Tensor*>& out);

private:
    nn::Tensor wz_, uz_, bz_;
    nn::Tensor wr_, ur_, br_;
    nn::Tensor wh_, uh_, bh_;
};

/// Produces the condition vector F_t from a history window. All variants
/// are pure functions of (parameters, window); batched inputs are stacked
/// sample-major as in WindowBatch::histories.
class Extractor {
public:
    virtual ~Extractor() = default;

    /// windows: (B·omega)×D -> features: B×hidden.
    virtual nn::Var forward(nn::Graph& g, nn::Var windows, Eigen::Index batch) = 0;

    const ExtractorConfig& config() const { return cfg_; }
    virtual std::vector<nn::Tensor*> params() = 0;
    nn::Tensor* param(const std::string& name);

    /// No-gradient batched evaluation.
    Matrix features(const Matrix& windows, Eigen::Index batch);
    /// Single-window convenience.
    FeatureState extract(const Matrix& window, Eigen::Index time_index = 0);

protected:
    explicit Extractor(ExtractorConfig cfg) : cfg_(std::move(cfg)) {}
    ExtractorConfig cfg_;
};

class GruExtractor final : public Extractor {
public:
    GruExtractor(const ExtractorConfig& cfg, Rng& rng);
    nn::Var forward(nn::Graph& g, nn::Var windows, Eigen::Index batch) override;
    std::vector<nn::Tensor*> params() override;

private:
    GruCell gru_;
};

class DoubleGatExtractor final : public Extractor {
public:
    DoubleGatExtractor(const ExtractorConfig& cfg, Rng& rng);
    nn::Var forward(nn::Graph& g, nn::Var windows, Eigen::Index batch) override;
    std::vector<nn::Tensor*> params() override;

    Matrix smooth_single(const Matrix& window);
    GatLayer& time_gat() { return time_gat_; }
    GatLayer& feature_gat() { return feat_gat_; }
    nn::Tensor& smooth_kernel() { return smooth_; }

private:
    nn::Var smooth(nn::Graph& g, nn::Var windows);
    nn::Tensor smooth_;
    GatLayer time_gat_;
    GatLayer feat_gat_;
    GruCell gru_;
};

/// One TCN-GAT block: multi-scale temporal convolution followed by a
/// feature-oriented attention pass.
class TcnGatBlock {
public:
    TcnGatBlock(const std::string& name, Eigen::Index data_dim, Eigen::Index window,
                double leaky_slope, Rng& rng);

    nn::Var forward(nn::Graph& g, nn::Var x, Eigen::Index window);
    /// The temporal convolution alone: average of the 3/5/7 branches.
    nn::Var tcn(nn::Graph& g, nn::Var x, Eigen::Index window);

    void collect_params(std::vector<nn::Tensor*>& out);
    GatLayer& gat() { return gat_; }

private:
    nn::Tensor conv_w_[3];
    nn::Tensor conv_b_[3];
    GatLayer gat_;
};

class TcnGatExtractor final : public Extractor {
public:
    TcnGatExtractor(const ExtractorConfig& cfg, Rng& rng);
    nn::Var forward(nn::Graph& g, nn::Var windows, Eigen::Index batch) override;
    std::vector<nn::Tensor*> params() override;

    Matrix smooth_single(const Matrix& window);
    Matrix tcn_single(int block, const Matrix& window);
    TcnGatBlock& block(int i) { return i == 0 ? block1_ : block2_; }
    nn::Tensor& smooth_kernel() { return smooth_; }

    /// Intermediate signals for a single window, in forward order.
    struct Stages {
        Matrix smoothed, block1, block2_input, block2;
    };
    Stages stages_single(const Matrix& window);

private:
    struct StageVars {
        nn::Var smoothed, block1, block2_input, block2, features;
    };
    StageVars forward_stages(nn::Graph& g, nn::Var windows, Eigen::Index batch);
    nn::Var smooth(nn::Graph& g, nn::Var windows);
    nn::Tensor smooth_;
    TcnGatBlock block1_;
    TcnGatBlock block2_;
    GruCell gru_;
};

std::unique_ptr<Extractor> make_extractor(const ExtractorConfig& cfg, Rng& rng);

}  // namespace tfdpm
