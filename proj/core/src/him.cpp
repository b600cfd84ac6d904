#include "focalcomm/him.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "focalcomm/geometry.hpp"
#include "focalcomm/hungarian.hpp"
#include "focalcomm/init.hpp"

namespace focalcomm {

namespace {

double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

void HimConfig::validate() const {
    if (n_stages < 1) throw std::invalid_argument("HimConfig: n_stages must be >= 1");
    if (tau <= 0.0 || tau >= 1.0) throw std::invalid_argument("HimConfig: tau must be in (0,1)");
    if (gamma < 1.0) throw std::invalid_argument("HimConfig: gamma must be >= 1");
    if (tau_iou < 0.0 || tau_iou > 1.0) throw std::invalid_argument("HimConfig: tau_iou must be in [0,1]");
    if (peak_kernel < 1 || peak_kernel % 2 == 0) {
        throw std::invalid_argument("HimConfig: peak_kernel must be odd and positive");
    }
}

double HimConfig::stage_threshold(int stage) const {
    const double exponent = threshold_decay ? -static_cast<double>(stage) : static_cast<double>(stage);
    return tau * std::pow(gamma, exponent);
}

HimModule::HimModule(int channels, int n_stages, int num_classes)
    : channels_(channels), n_stages_(n_stages), num_classes_(num_classes) {
    if (channels < 1 || n_stages < 1 || num_classes < 1) {
        throw std::invalid_argument("HimModule: invalid sizes");
    }
    for (int s = 0; s < n_stages; ++s) {
        StageExtractor e;
        e.weight = Parameter("him.stage" + std::to_string(s) + ".weight", Tensor({channels, channels, 3, 3}));
        e.bias = Parameter("him.stage" + std::to_string(s) + ".bias", Tensor({channels}));
        extractors_.push_back(std::move(e));
    }
    detector_weight_ = Parameter("him.detector.weight", Tensor({num_classes, channels, 1, 1}));
    detector_bias_ = Parameter("him.detector.bias", Tensor({num_classes}));
}

std::vector<Parameter*> HimModule::parameters() {
    std::vector<Parameter*> out;
    for (StageExtractor& e : extractors_) {
        out.push_back(&e.weight);
        out.push_back(&e.bias);
    }
    out.push_back(&detector_weight_);
    out.push_back(&detector_bias_);
    return out;
}

void HimModule::init(std::mt19937_64& rng) {
    for (StageExtractor& e : extractors_) {
        init_uniform(e.weight, channels_ * 9, rng);
        init_uniform(e.bias, channels_ * 9, rng);
    }
    init_uniform(detector_weight_, channels_, rng);
    // sparse early heatmaps: sigmoid(-2.19) ~ 0.1
    detector_bias_.value.fill(-2.19);
}

Tensor HimModule::filter(const Tensor& heatmap_logits, int stage, const HimConfig& cfg) {
    cfg.validate();
    if (stage < 0 || stage >= cfg.n_stages) {
        throw std::invalid_argument("HimModule::filter: stage out of range");
    }
    const double threshold = cfg.stage_threshold(stage);
    const Tensor peaks = max_pool_peaks(heatmap_logits, cfg.peak_kernel);
    Tensor mask(heatmap_logits.shape());
    for (std::int64_t i = 0; i < mask.size(); ++i) {
        mask[i] = (peaks[i] == 1.0 && stable_sigmoid(heatmap_logits[i]) > threshold) ? 1.0 : 0.0;
    }
    return mask;
}

Tensor HimModule::match(const std::vector<StagePrediction>& predictions, const std::vector<GroundTruthBox>& gt,
                        double tau_iou, int num_classes, const BevGrid& grid) {
    Tensor mask({num_classes, grid.height, grid.width});
    const std::int64_t plane = static_cast<std::int64_t>(grid.height) * grid.width;
    for (int cls = 0; cls < num_classes; ++cls) {
        std::vector<const StagePrediction*> preds;
        std::vector<const GroundTruthBox*> gts;
        for (const StagePrediction& p : predictions) {
            if (p.class_id == cls) preds.push_back(&p);
        }
        for (const GroundTruthBox& g : gt) {
            if (g.class_id == cls) gts.push_back(&g);
        }
        if (preds.empty() || gts.empty()) continue;
        std::vector<std::vector<double>> cost(preds.size(), std::vector<double>(gts.size()));
        for (std::size_t i = 0; i < preds.size(); ++i) {
            for (std::size_t j = 0; j < gts.size(); ++j) {
                const double dx = std::abs(preds[i]->box.cx - gts[j]->cx);
                const double dy = std::abs(preds[i]->box.cy - gts[j]->cy);
                cost[i][j] = (1.0 - preds[i]->score) + 0.25 * (dx + dy);
            }
        }
        const std::vector<int> assign = hungarian_assign(cost);
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const int j = assign[i];
            if (j < 0) continue;
            if (rotated_bev_iou(preds[i]->box.bev(), gts[static_cast<std::size_t>(j)]->bev()) > tau_iou) {
                mask[static_cast<std::int64_t>(cls) * plane + preds[i]->cell] = 1.0;
            }
        }
    }
    return mask;
}

HimResult HimModule::run(const Tensor& features, const std::vector<GroundTruthBox>* gt, const HimConfig& cfg,
                         HimMode mode, const BevGrid& grid) const {
    cfg.validate();
    if (features.rank() != 3 || features.extent(0) != channels_) {
        throw std::invalid_argument("HimModule::run: expected [" + std::to_string(channels_) +
                                    ", H, W] features, got " + features.shape_str());
    }
    if (!features.all_finite()) {
        throw std::invalid_argument("HimModule::run: non-finite features");
    }
    if (mode == HimMode::Train && gt == nullptr) {
        throw std::invalid_argument("HimModule::run: train mode requires ground truth");
    }
    const int h = features.extent(1);
    const int w = features.extent(2);
    if (grid.height != h || grid.width != w) {
        throw std::invalid_argument("HimModule::run: grid extents do not match features");
    }
    if (cfg.n_stages != n_stages_) {
        throw std::invalid_argument("HimModule::run: config stages do not match module");
    }
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;

    HimResult result;
    Tensor accumulated({num_classes_, h, w});  // binary, never taped
    std::vector<Tensor> stage_features;

    for (int s = 0; s < cfg.n_stages; ++s) {
        result.incoming_masks.push_back(accumulated);

        // Flatten: spatial suppression is the class-wise max of the mask
        Tensor spatial_keep({h, w});
        for (std::int64_t i = 0; i < plane; ++i) {
            double m = 0.0;
            for (int k = 0; k < num_classes_; ++k) m = std::max(m, accumulated[k * plane + i]);
            spatial_keep[i] = 1.0 - m;
        }

        // Mask always applies to the cached original features
        Tensor masked = mul(features, spatial_keep);
        const StageExtractor& e = extractors_[static_cast<std::size_t>(s)];
        Tensor stage_feat = relu(conv2d(masked, e.weight.value, e.bias.value));
        Tensor logits = conv2d(stage_feat, detector_weight_.value, detector_bias_.value);

        // candidate predictions: stage-thresholded peaks at not-yet-claimed cells
        const Tensor candidates = filter(logits, s, cfg);
        std::vector<StagePrediction> predictions;
        for (int k = 0; k < num_classes_; ++k) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const std::int64_t idx = (static_cast<std::int64_t>(k) * h + y) * w + x;
                    if (candidates[idx] != 1.0) continue;
                    if (spatial_keep[grid.flat(y, x)] == 0.0) continue;
                    StagePrediction p;
                    p.cell = grid.flat(y, x);
                    p.class_id = k;
                    p.score = stable_sigmoid(logits[idx]);
                    const ClassPrior prior = class_prior(k);
                    p.box.cx = grid.cell_center_x(x);
                    p.box.cy = grid.cell_center_y(y);
                    p.box.cz = 0.5 * prior.height;
                    p.box.length = prior.length;
                    p.box.width = prior.width;
                    p.box.height = prior.height;
                    p.box.yaw = 0.0;
                    p.box.class_id = k;
                    predictions.push_back(p);
                }
            }
        }

        Tensor stage_mask;
        if (mode == HimMode::Train) {
            stage_mask = match(predictions, *gt, cfg.tau_iou, num_classes_, grid);
        } else {
            stage_mask = candidates;
            for (int k = 0; k < num_classes_; ++k) {
                for (std::int64_t i = 0; i < plane; ++i) {
                    if (spatial_keep[i] == 0.0) stage_mask[k * plane + i] = 0.0;
                }
            }
        }

        // Update: elementwise max keeps the accumulated mask monotone
        for (std::int64_t i = 0; i < accumulated.size(); ++i) {
            accumulated[i] = std::max(accumulated[i], stage_mask[i]);
        }

        StageOutput out;
        out.features = stage_feat;
        out.heatmap_logits = logits;
        out.predictions = std::move(predictions);
        out.stage_mask = std::move(stage_mask);
        stage_features.push_back(stage_feat);
        result.stages.push_back(std::move(out));
    }

    result.combined_query = concat(stage_features, 0);
    result.accumulated_mask = accumulated;
    return result;
}

std::string heatmap_to_pgm(const Tensor& heatmap_logits, int class_plane) {
    if (heatmap_logits.rank() != 3) {
        throw std::invalid_argument("heatmap_to_pgm: expected [K,H,W], got " + heatmap_logits.shape_str());
    }
    const int k = heatmap_logits.extent(0);
    const int h = heatmap_logits.extent(1);
    const int w = heatmap_logits.extent(2);
    if (class_plane < 0 || class_plane >= k) {
        throw std::invalid_argument("heatmap_to_pgm: class plane out of range");
    }
    std::string out = "P5 " + std::to_string(w) + " " + std::to_string(h) + " 255\n";
    out.reserve(out.size() + static_cast<std::size_t>(h) * w);
    const std::int64_t base = static_cast<std::int64_t>(class_plane) * h * w;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
        const double sigma = stable_sigmoid(heatmap_logits[base + i]);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * sigma))));
    }
    return out;
}

}  // namespace focalcomm
