#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "axial/attention.hpp"
#include "axial/ops.hpp"

namespace axial {

enum class Family { Axial, Resnet, ConvBaseline };
enum class StemKind { Conv7, Conv3, FullAxial };

// Declarative description of a model variant. The same spec drives model
// construction and the analytic cost model, so the two cannot drift apart.
struct ModelSpec {
    Family family = Family::Axial;
    StemKind stem = StemKind::Conv7;
    double width_multiplier = 1.0;
    std::vector<int> stage_blocks = {3, 4, 6, 3};
    // One entry applies to every stage, otherwise one per stage.
    std::vector<Span> spans = {Span::Global()};
    int stem_span = 15;       // local span of full-axial stem blocks
    int stem_stride = 2;      // conv3 stem stride (toy models)
    int heads = 8;
    int num_classes = 1000;
    int input_resolution = 224;
    int base_width = 128;     // stage-1 attention bottleneck at multiplier 1
    int stem_channels = 64;   // at multiplier 1
    int resnet_base = 64;     // resnet bottleneck base (expansion 4)
    double baseline_ratio = 0.75;  // conv-baseline bottleneck vs axial width

    void validate() const;
    Span span_for_stage(int i) const;
    int stages() const { return int(stage_blocks.size()); }
};

// ---- construction plan ----

struct AttnPlan {
    std::string name;
    Axis axis = Axis::Width;
    Span span = Span::Global();
    int global_cap = 0;  // construction-time axis bound for Global span
    int d_in = 0, heads = 1, d_q = 0, d_out = 0;
    int h = 0, w = 0;    // resolution at attention time

    int table_entries() const {
        return span.global ? 2 * global_cap - 1 : 2 * span.m - 1;
    }
    int max_offset() const { return span.global ? global_cap - 1 : span.m - 1; }
    int axis_len() const { return axis == Axis::Width ? w : h; }
    int lines() const { return axis == Axis::Width ? h : w; }
};

struct ConvPlan {
    std::string name;
    int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
    int h_out = 0, w_out = 0;
    bool bn = true;
};

struct BlockPlan {
    std::string name;
    bool is_axial = true;
    int cin = 0, width = 0, cout = 0, stride = 1;
    int h_in = 0, w_in = 0, h_out = 0, w_out = 0;
    AttnPlan attn_h, attn_w;  // axial blocks
    bool shortcut = false;    // projection shortcut
};

struct ModelPlan {
    ModelSpec spec;
    std::vector<ConvPlan> stem_convs;
    bool stem_maxpool = false;
    bool stem_avgpool = false;
    std::vector<BlockPlan> stem_blocks;  // full-axial stem
    std::vector<BlockPlan> blocks;       // stage blocks, stageI.blockJ
    int feat_channels = 0;
    int final_h = 0, final_w = 0;
    int input_h = 0, input_w = 0;

    bool any_global_span() const;
    std::vector<std::string> attention_layer_names() const;
};

// Resolutions computed for `resolution` (defaults to the spec's); parameter
// shapes, including global-span tables, are fixed by the spec alone.
ModelPlan plan_model(const ModelSpec& spec, int resolution = 0);

// ---- parameters ----

template <typename T>
class ParamStore {
public:
    Tensor<T>& create(const std::string& name, Tensor<T> init) {
        for (auto& [n, v] : items_)
            if (n == name) throw ConfigError("duplicate parameter " + name);
        items_.emplace_back(name, std::move(init));
        return items_.back().second;
    }
    Tensor<T>& get(const std::string& name) {
        for (auto& [n, v] : items_)
            if (n == name) return v;
        throw ConfigError("unknown parameter " + name);
    }
    const Tensor<T>& get(const std::string& name) const {
        return const_cast<ParamStore*>(this)->get(name);
    }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    std::size_t size() const { return items_.size(); }
    long long total_count() const {
        long long n = 0;
        for (const auto& [k, v] : items_) n += (long long)v.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
};

template <typename T>
struct Model {
    ModelPlan plan;
    ParamStore<T> params;
    std::map<std::string, ops::BnBuffers<T>> bn;  // keyed by site name
};

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed);

// Binds parameters to tape leaves once per forward and remembers the vars so
// callers can read gradients by name afterwards.
template <typename T>
struct Binder {
    Model<T>* model = nullptr;
    Tape<T>* tape = nullptr;
    bool requires_grad = false;
    std::vector<std::pair<std::string, Var>> bound;

    Var operator()(const std::string& name) {
        for (auto& [n, v] : bound)
            if (n == name) return v;
        Var v = tape->leaf(model->params.get(name), requires_grad);
        bound.emplace_back(name, v);
        return v;
    }
    Var find(const std::string& name) const {
        for (auto& [n, v] : bound)
            if (n == name) return v;
        throw ConfigError("parameter not bound: " + name);
    }
};

// Attention-map capture request: layer name -> filled capture.
struct CaptureMap {
    std::set<std::string> wanted;
    std::map<std::string, AttentionCapture> out;
};

template <typename T>
struct ForwardOut {
    Var logits;
    Binder<T> binder;
};

// Runs one axial (or conv) block; exposed for block-level tests.
template <typename T>
Var block_forward(Tape<T>& t, const BlockPlan& bp, Var x, ops::BnMode mode,
                  Binder<T>& bind, Model<T>& model,
                  CaptureMap* capture = nullptr);

template <typename T>
ForwardOut<T> model_forward(Model<T>& m, Tape<T>& t, const Tensor<T>& x,
                            ops::BnMode mode, bool with_grads = false,
                            CaptureMap* capture = nullptr);

// ---- canned specs ----

ModelSpec resnet50_spec();
ModelSpec conv_stem_axial_spec(double multiplier);
ModelSpec full_axial_spec(double multiplier);
// Control arm: same stem, stage widths, strides and head; the two axial
// layers replaced by one 3x3 convolution at a narrowed bottleneck.
ModelSpec matched_baseline(const ModelSpec& axial);

// Receptive field of a spatial-convolution-only plan, in input pixels.
// Throws ConfigError if the plan contains attention layers.
int receptive_field(const ModelPlan& plan);

}  // namespace axial
