#include "focalcomm/head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "focalcomm/geometry.hpp"
#include "focalcomm/init.hpp"

namespace focalcomm {

namespace {

double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

void HeadConfig::validate() const {
    if (heads < 1 || model_dim < 1 || model_dim % heads != 0) {
        throw std::invalid_argument("HeadConfig: model_dim must be positive and divisible by heads");
    }
    if (top_k < 1) throw std::invalid_argument("HeadConfig: top_k must be >= 1");
    if (nms_iou < 0.0 || nms_iou > 1.0) throw std::invalid_argument("HeadConfig: nms_iou must be in [0,1]");
}

DetectionHead::DetectionHead(int fused_channels, int him_query_channels, const HeadConfig& cfg, int num_classes)
    : fused_channels_(fused_channels), him_query_channels_(him_query_channels), num_classes_(num_classes),
      cfg_(cfg) {
    cfg_.validate();
    if (fused_channels < 1 || him_query_channels < 0 || num_classes < 1) {
        throw std::invalid_argument("DetectionHead: invalid sizes");
    }
    const int d = cfg_.model_dim;
    input_w = Parameter("head.input.weight", Tensor({d, 2 * fused_channels, 1, 1}));
    input_b = Parameter("head.input.bias", Tensor({d}));
    heatmap_w = Parameter("head.heatmap.weight", Tensor({num_classes, d, 1, 1}));
    heatmap_b = Parameter("head.heatmap.bias", Tensor({num_classes}));
    query_w = Parameter("head.query.weight", Tensor({d + him_query_channels, d}));
    query_b = Parameter("head.query.bias", Tensor({d}));
    const auto mat = [&](const char* name, int rows, int cols) {
        return Parameter(std::string("head.") + name, Tensor({rows, cols}));
    };
    const auto vec = [&](const char* name, int n) { return Parameter(std::string("head.") + name, Tensor({n})); };
    self_q_w = mat("self.query.weight", d, d);
    self_q_b = vec("self.query.bias", d);
    self_k_w = mat("self.key.weight", d, d);
    self_k_b = vec("self.key.bias", d);
    self_v_w = mat("self.value.weight", d, d);
    self_v_b = vec("self.value.bias", d);
    self_o_w = mat("self.out.weight", d, d);
    self_o_b = vec("self.out.bias", d);
    cross_q_w = mat("cross.query.weight", d, d);
    cross_q_b = vec("cross.query.bias", d);
    cross_k_w = mat("cross.key.weight", d, d);
    cross_k_b = vec("cross.key.bias", d);
    cross_v_w = mat("cross.value.weight", d, d);
    cross_v_b = vec("cross.value.bias", d);
    cross_o_w = mat("cross.out.weight", d, d);
    cross_o_b = vec("cross.out.bias", d);
    ffn1_w = mat("ffn1.weight", d, d);
    ffn1_b = vec("ffn1.bias", d);
    ffn2_w = mat("ffn2.weight", d, d);
    ffn2_b = vec("ffn2.bias", d);
    offset_w = mat("offset.weight", d, 2);
    offset_b = vec("offset.bias", 2);
    zed_w = mat("z.weight", d, 1);
    zed_b = vec("z.bias", 1);
    dims_w = mat("dims.weight", d, 3);
    dims_b = vec("dims.bias", 3);
    rot_w = mat("rot.weight", d, 2);
    rot_b = vec("rot.bias", 2);
    cls_w = mat("cls.weight", d, num_classes);
    cls_b = vec("cls.bias", num_classes);
}

std::vector<Parameter*> DetectionHead::parameters() {
    return {&input_w,  &input_b,  &heatmap_w, &heatmap_b, &query_w,  &query_b,  &self_q_w,  &self_q_b,
            &self_k_w, &self_k_b, &self_v_w,  &self_v_b,  &self_o_w, &self_o_b, &cross_q_w, &cross_q_b,
            &cross_k_w, &cross_k_b, &cross_v_w, &cross_v_b, &cross_o_w, &cross_o_b, &ffn1_w, &ffn1_b,
            &ffn2_w,   &ffn2_b,   &offset_w,  &offset_b,  &zed_w,    &zed_b,    &dims_w,    &dims_b,
            &rot_w,    &rot_b,    &cls_w,     &cls_b};
}

void DetectionHead::init(std::mt19937_64& rng) {
    const int d = cfg_.model_dim;
    init_uniform(input_w, 2 * fused_channels_, rng);
    init_uniform(input_b, 2 * fused_channels_, rng);
    init_uniform(heatmap_w, d, rng);
    heatmap_b.value.fill(-2.19);  // sparse initial heatmap, sigmoid ~ 0.1
    init_uniform(query_w, d + him_query_channels_, rng);
    init_uniform(query_b, d + him_query_channels_, rng);
    for (Parameter* p : {&self_q_w, &self_k_w, &self_v_w, &self_o_w, &cross_q_w, &cross_k_w, &cross_v_w,
                         &cross_o_w, &ffn1_w, &ffn2_w, &offset_w, &zed_w, &dims_w, &rot_w, &cls_w}) {
        init_uniform(*p, d, rng);
    }
    for (Parameter* p : {&self_q_b, &self_k_b, &self_v_b, &self_o_b, &cross_q_b, &cross_k_b, &cross_v_b,
                         &cross_o_b, &ffn1_b, &ffn2_b, &offset_b, &zed_b, &dims_b, &rot_b, &cls_b}) {
        init_uniform(*p, d, rng);
    }
}

Tensor DetectionHead::attention(const Tensor& queries, const Tensor& memory, const Parameter& qw,
                                const Parameter& qb, const Parameter& kw, const Parameter& kb,
                                const Parameter& vw, const Parameter& vb, const Parameter& ow,
                                const Parameter& ob) const {
    const int m = queries.extent(0);
    const int t = memory.extent(0);
    const int d = cfg_.model_dim;
    const int heads = cfg_.heads;
    const int dh = d / heads;

    Tensor q = linear(queries, qw.value, qb.value);  // [M, D]
    Tensor k = linear(memory, kw.value, kb.value);   // [T, D]
    Tensor v = linear(memory, vw.value, vb.value);
    const auto split = [&](const Tensor& x, int rows) {
        return permute(reshape(x, {rows, heads, dh}), {1, 0, 2});  // [h, rows, dh]
    };
    Tensor qh = split(q, m);
    Tensor kh = split(k, t);
    Tensor vh = split(v, t);
    Tensor scores = scale(bmm(qh, permute(kh, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(scores, -1);
    Tensor ctx = bmm(attn, vh);  // [h, M, dh]
    Tensor merged = reshape(permute(ctx, {1, 0, 2}), {m, d});
    return linear(merged, ow.value, ob.value);
}

HeadOutput DetectionHead::forward(const Tensor& fused, const Tensor& ego, const Tensor* him_query,
                                  int top_k) const {
    if (fused.rank() != 3 || ego.rank() != 3 || fused.extent(0) != fused_channels_ ||
        ego.extent(0) != fused_channels_) {
        throw std::invalid_argument("DetectionHead::forward: bad input shapes " + fused.shape_str() + ", " +
                                    ego.shape_str());
    }
    if ((him_query_channels_ > 0) != (him_query != nullptr)) {
        throw std::invalid_argument("DetectionHead::forward: mining-query input does not match head layout");
    }
    const int h = fused.extent(1);
    const int w = fused.extent(2);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    if (top_k < 1 || top_k > hw) {
        throw std::invalid_argument("DetectionHead::forward: top_k out of range for " +
                                    std::to_string(hw) + " cells");
    }

    Tensor head_in = concat({fused, ego}, 0);
    Tensor f_head = relu(conv2d(head_in, input_w.value, input_b.value));  // [D,H,W]
    Tensor heatmap_logits = conv2d(f_head, heatmap_w.value, heatmap_b.value);

    // query cells: local peaks of the class-max map ranked by score,
    // row-major ties
    Tensor class_max({h, w});
    {
        const std::int64_t plane = hw;
        for (std::int64_t i = 0; i < plane; ++i) {
            double best = heatmap_logits[i];
            for (int k = 1; k < num_classes_; ++k) best = std::max(best, heatmap_logits[k * plane + i]);
            class_max[i] = best;
        }
    }
    const Tensor peaks = max_pool_peaks(class_max, 3);
    std::vector<int> candidates;
    for (std::int64_t i = 0; i < hw; ++i) {
        if (peaks[i] == 1.0) candidates.push_back(static_cast<int>(i));
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        if (class_max[a] != class_max[b]) return class_max[a] > class_max[b];
        return a < b;
    });
    if (static_cast<int>(candidates.size()) > top_k) candidates.resize(static_cast<std::size_t>(top_k));

    Tensor query_feats = gather_cells(f_head, candidates);  // [M, D]
    if (him_query != nullptr) {
        Tensor mining = gather_cells(*him_query, candidates);  // [M, QC]
        query_feats = concat({query_feats, mining}, 1);
    }
    Tensor queries = relu(linear(query_feats, query_w.value, query_b.value));  // [M, D]

    // one decoder layer: self-attention, cross-attention into the dense map, FFN
    queries = add(queries, attention(queries, queries, self_q_w, self_q_b, self_k_w, self_k_b, self_v_w,
                                     self_v_b, self_o_w, self_o_b));
    Tensor memory = reshape(permute(f_head, {1, 2, 0}), {static_cast<int>(hw), cfg_.model_dim});
    queries = add(queries, attention(queries, memory, cross_q_w, cross_q_b, cross_k_w, cross_k_b, cross_v_w,
                                     cross_v_b, cross_o_w, cross_o_b));
    queries = add(queries, linear(relu(linear(queries, ffn1_w.value, ffn1_b.value)), ffn2_w.value, ffn2_b.value));

    HeadOutput out;
    out.heatmap_logits = std::move(heatmap_logits);
    out.cells = std::move(candidates);
    out.class_logits = linear(queries, cls_w.value, cls_b.value);
    Tensor offsets = linear(queries, offset_w.value, offset_b.value);
    Tensor zed = linear(queries, zed_w.value, zed_b.value);
    Tensor dims = linear(queries, dims_w.value, dims_b.value);
    Tensor rot = linear(queries, rot_w.value, rot_b.value);
    out.box_params = concat({offsets, zed, dims, rot}, 1);  // [M, 8]
    return out;
}

std::vector<Detection> DetectionHead::decode(const HeadOutput& out, const BevGrid& grid, double nms_iou) const {
    const int m = static_cast<int>(out.cells.size());
    std::vector<Detection> all;
    all.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const int cell = out.cells[static_cast<std::size_t>(i)];
        const int cy = cell / grid.width;
        const int cx = cell % grid.width;
        int best_class = 0;
        double best_logit = out.class_logits.at({i, 0});
        for (int k = 1; k < num_classes_; ++k) {
            const double l = out.class_logits.at({i, k});
            if (l > best_logit) {
                best_logit = l;
                best_class = k;
            }
        }
        Detection det;
        det.class_id = best_class;
        det.score = stable_sigmoid(best_logit);
        det.box.cx = grid.cell_center_x(cx) + out.box_params.at({i, 0}) * grid.cell_size;
        det.box.cy = grid.cell_center_y(cy) + out.box_params.at({i, 1}) * grid.cell_size;
        det.box.cz = out.box_params.at({i, 2});
        det.box.length = std::exp(out.box_params.at({i, 3}));
        det.box.width = std::exp(out.box_params.at({i, 4}));
        det.box.height = std::exp(out.box_params.at({i, 5}));
        det.box.yaw = std::atan2(out.box_params.at({i, 6}), out.box_params.at({i, 7}));
        det.box.class_id = best_class;
        all.push_back(det);
    }

    // per-class greedy NMS
    std::vector<Detection> kept;
    for (int k = 0; k < num_classes_; ++k) {
        std::vector<OrientedBox> boxes;
        std::vector<double> scores;
        std::vector<int> index;
        for (int i = 0; i < m; ++i) {
            if (all[static_cast<std::size_t>(i)].class_id != k) continue;
            boxes.push_back(all[static_cast<std::size_t>(i)].box.bev());
            scores.push_back(all[static_cast<std::size_t>(i)].score);
            index.push_back(i);
        }
        if (boxes.empty()) continue;
        for (int keep : greedy_nms(boxes, scores, nms_iou)) {
            kept.push_back(all[static_cast<std::size_t>(index[static_cast<std::size_t>(keep)])]);
        }
    }
    // deterministic output order: descending score, then cell index
    std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
        return a.box.cy < b.box.cy;
    });
    return kept;
}

std::array<double, 8> DetectionHead::regression_targets(const GroundTruthBox& gt, int cell, const BevGrid& grid) {
    const int cy = cell / grid.width;
    const int cx = cell % grid.width;
    return {
        (gt.cx - grid.cell_center_x(cx)) / grid.cell_size,
        (gt.cy - grid.cell_center_y(cy)) / grid.cell_size,
        gt.cz,
        std::log(gt.length),
        std::log(gt.width),
        std::log(gt.height),
        std::sin(gt.yaw),
        std::cos(gt.yaw),
    };
}

}  // namespace focalcomm
