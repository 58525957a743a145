#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "habitat/checkpoint.hpp"
#include "habitat/common.hpp"
#include "habitat/dataset.hpp"
#include "habitat/losses.hpp"
#include "habitat/metrics.hpp"
#include "habitat/model.hpp"
#include "habitat/optimizer.hpp"
#include "habitat/predictions.hpp"
#include "habitat/taxonomy.hpp"

namespace habitat {

enum class Paradigm { supervised, supcon };

inline std::string paradigm_name(Paradigm p) { return p == Paradigm::supervised ? "supervised" : "supcon"; }

inline Paradigm parse_paradigm(const std::string& s) {
    if (s == "supervised") return Paradigm::supervised;
    if (s == "supcon") return Paradigm::supcon;
    fail("training: unknown paradigm '" + s + "'");
}

struct TrainConfig {
    Paradigm paradigm = Paradigm::supervised;
    double learning_rate = 5e-6;
    double weight_decay = 0.05;
    std::size_t batch_size = 16;
    std::size_t epochs = 50;
    double temperature = 0.1;       // supcon
    std::size_t projection_hidden = 0; // 0 → embed_dim
    std::size_t projection_dim = 128;
    AugmentationConfig augmentation = AugmentationConfig::standard(384, 384, 15.0, 0);
    std::uint64_t seed = 0;
};

/// Hyperparameters used for the full-scale runs: AdamW at 5e-6 / 0.05,
/// batch 16, 50 epochs, temperature 0.1, 384px inputs.
inline TrainConfig full_scale_train_defaults() { return TrainConfig{}; }

/// Desk-scale profile for the procedural toy datasets and the test suite.
inline TrainConfig toy_train_defaults() {
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.weight_decay = 1e-4;
    c.batch_size = 16;
    c.epochs = 30;
    c.temperature = 0.1;
    c.augmentation = AugmentationConfig::standard(64, 64, 10.0, 0);
    return c;
}

inline std::vector<std::string> validate_train_config(const TrainConfig& c) {
    std::vector<std::string> diags;
    if (!(c.learning_rate > 0.0)) diags.push_back("learning_rate must be positive");
    if (c.weight_decay < 0.0) diags.push_back("weight_decay must be nonnegative");
    if (c.batch_size < 1) diags.push_back("batch_size must be at least 1");
    if (c.paradigm == Paradigm::supcon) {
        if (c.batch_size < 2) diags.push_back("supcon requires batch_size >= 2");
        if (!(c.temperature > 0.0)) diags.push_back("supcon requires a positive temperature");
    }
    if (c.augmentation.resize_to <= 0) diags.push_back("resize_to must be positive");
    for (const auto& op : c.augmentation.ops) {
        if (op.kind == AugOp::Kind::random_crop && op.crop_size > c.augmentation.resize_to)
            diags.push_back("crop size " + fmt_int(op.crop_size) + " exceeds resize_to " + fmt_int(c.augmentation.resize_to));
        if (op.kind == AugOp::Kind::random_crop && op.crop_size <= 0) diags.push_back("crop size must be positive");
        if (op.kind == AugOp::Kind::random_rotation && op.max_degrees < 0.0)
            diags.push_back("rotation range must be nonnegative");
    }
    return diags;
}

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_top1 = 0.0;
};

struct TrainRunRecord {
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0; // 0 when no epochs ran
    double wall_clock_sec = 0.0;
};

inline void save_run_record(const std::filesystem::path& path, const TrainRunRecord& record) {
    std::ofstream out(path);
    if (!out) fail("training: cannot write " + path.string());
    out << "epoch,train_loss,val_loss,val_top1\n";
    for (const auto& e : record.epochs)
        out << e.epoch << "," << fmt_double(e.train_loss) << "," << fmt_double(e.val_loss) << ","
            << fmt_double(e.val_top1) << "\n";
}

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["paradigm"] = paradigm_name(c.paradigm);
    j["learning_rate"] = c.learning_rate;
    j["weight_decay"] = c.weight_decay;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["temperature"] = c.temperature;
    j["projection_hidden"] = c.projection_hidden;
    j["projection_dim"] = c.projection_dim;
    nlohmann::ordered_json aug;
    aug["resize_to"] = c.augmentation.resize_to;
    nlohmann::ordered_json ops = nlohmann::ordered_json::array();
    for (const auto& op : c.augmentation.ops) {
        nlohmann::ordered_json o;
        if (op.kind == AugOp::Kind::random_crop) {
            o["op"] = "random_crop";
            o["size"] = op.crop_size;
        } else {
            o["op"] = "random_rotation";
            o["max_degrees"] = op.max_degrees;
        }
        ops.push_back(o);
    }
    aug["ops"] = ops;
    j["augmentation"] = aug;
    j["seed"] = c.seed;
    return j;
}

// ---------------------------------------------------------------------------
// Image access
// ---------------------------------------------------------------------------

/// Decoded-image cache over a manifest. Keeps images in memory up to a byte
/// budget; past that, reads fall through to disk.
class ImageStore {
public:
    explicit ImageStore(const DatasetManifest& manifest, std::size_t max_cache_bytes = 512ull * 1024 * 1024)
        : manifest_(manifest), budget_(max_cache_bytes) {
        for (std::size_t i = 0; i < manifest.records.size(); ++i) index_[manifest.records[i].sample_id] = i;
    }

    const SampleRecord& record(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) fail("training: sample '" + id + "' not in manifest");
        return manifest_.records[it->second];
    }

    FloatImage load(const std::string& id) {
        auto it = cache_.find(id);
        if (it != cache_.end()) return it->second;
        FloatImage img = load_float_image(manifest_.resolve(record(id)));
        const std::size_t bytes = img.rgb.size() * sizeof(double);
        if (used_ + bytes <= budget_) {
            used_ += bytes;
            cache_.emplace(id, img);
        }
        return img;
    }

private:
    const DatasetManifest& manifest_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, FloatImage> cache_;
    std::size_t budget_;
    std::size_t used_ = 0;
};

/// Deterministic inference-time transform: plain resize to the encoder input.
inline FloatImage eval_transform(const FloatImage& img, int input_size) {
    return resize_bilinear(img, input_size, input_size);
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

namespace detail {

inline void require_valid_config(const TrainConfig& c) {
    const auto diags = validate_train_config(c);
    if (!diags.empty()) {
        std::string msg = "training: invalid config:";
        for (const auto& d : diags) msg += " [" + d + "]";
        fail(msg);
    }
}

inline void require_io_sizes(const TrainConfig& c, const EncoderSpec& spec) {
    if (c.augmentation.output_size() != spec.input_size)
        fail("training: augmentation output size " + fmt_int(c.augmentation.output_size()) +
             " does not match encoder input size " + fmt_int(spec.input_size));
}

// d loss / d scores → head gradients (+ returns d loss / d embedding).
inline std::vector<double> classifier_backward(const std::vector<double>& embedding, const Matrix& w,
                                               const std::vector<double>& dscores, ParamMap& grads,
                                               const std::string& prefix = "head.") {
    Matrix dw(w.rows, w.cols);
    std::vector<double> de(w.rows, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double e = embedding[i];
        const double* wi = w.row_ptr(i);
        double* dwi = dw.row_ptr(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < w.cols; ++j) {
            dwi[j] = e * dscores[j];
            acc += wi[j] * dscores[j];
        }
        de[i] = acc;
    }
    Matrix db(1, w.cols);
    for (std::size_t j = 0; j < w.cols; ++j) db.data[j] = dscores[j];
    accumulate_grad(grads, prefix + "w", dw);
    accumulate_grad(grads, prefix + "b", db);
    return de;
}

struct ValStats {
    double loss = 0.0;
    double top1 = 0.0;
};

inline ValStats classifier_val_stats(const Model& model, ImageStore& store, const std::vector<std::string>& val_ids,
                                     const Taxonomy& tax) {
    ValStats v;
    if (val_ids.empty()) return v;
    std::size_t hits = 0;
    for (const auto& id : val_ids) {
        const FloatImage x = eval_transform(store.load(id), model.spec.input_size);
        const auto emb = tiny_forward(model.spec, model.params, x).embedding;
        const auto res = classify_core(emb, param(model.params, "head.w"), param(model.params, "head.b"));
        const std::size_t truth = tax.l3_index(store.record(id).l3_label);
        v.loss += cross_entropy_loss(res.scores, truth);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < res.scores.size(); ++j)
            if (res.scores[j] > res.scores[arg]) arg = j;
        if (arg == truth) ++hits;
    }
    v.loss /= static_cast<double>(val_ids.size());
    v.top1 = static_cast<double>(hits) / static_cast<double>(val_ids.size());
    return v;
}

inline std::vector<std::vector<std::string>> batches_for_epoch(const std::vector<std::string>& ids,
                                                               std::size_t batch_size, std::uint64_t seed,
                                                               std::size_t epoch) {
    std::vector<std::string> order = ids;
    Rng rng(derive_seed(seed, "epoch", epoch));
    rng.shuffle(order);
    std::vector<std::vector<std::string>> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

} // namespace detail

struct TrainOutput {
    Model final_model;
    Model best_model;
    TrainRunRecord record;
};

// ---------------------------------------------------------------------------
// Supervised: encoder and classifier trained end to end under cross-entropy.
// ---------------------------------------------------------------------------

inline TrainOutput train_supervised(const TrainConfig& config, const DatasetManifest& manifest,
                                    const SplitAssignment& split, const EncoderSpec& spec, const Taxonomy& tax) {
    if (config.paradigm != Paradigm::supervised) fail("training: train_supervised requires the supervised paradigm");
    detail::require_valid_config(config);
    validate_encoder_spec(spec);
    detail::require_io_sizes(config, spec);
    if (spec.kind != EncoderKind::reference_tiny) fail("training: only the reference_tiny encoder is trainable in-process");

    const auto train_ids = split_ids(manifest, split, Split::train);
    const auto val_ids = split_ids(manifest, split, Split::val);
    if (train_ids.empty()) fail("training: train split is empty");
    if (config.epochs > 0 && val_ids.empty()) fail("training: validation split is empty");

    Model model;
    model.spec = spec;
    model.class_order = tax.l3_order();
    model.params = reference_tiny_init(spec, config.seed);
    install_classifier(model, init_classifier_head(spec.embed_dim, model.class_order, config.seed));

    ImageStore store(manifest);
    AdamW opt(config.learning_rate, config.weight_decay);
    TrainOutput out;
    out.best_model = model;
    double best_top1 = -1.0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t n_seen = 0;
        for (const auto& batch : detail::batches_for_epoch(train_ids, config.batch_size, config.seed, epoch)) {
            ParamMap grads;
            double batch_loss = 0.0;
            const double inv_b = 1.0 / static_cast<double>(batch.size());
            for (const auto& id : batch) {
                Rng aug_rng(derive_seed(config.seed, "aug/" + id, epoch));
                const FloatImage x = augment(store.load(id), config.augmentation, aug_rng);
                TinyCache cache = tiny_forward(model.spec, model.params, x);
                const auto res = classify_core(cache.embedding, param(model.params, "head.w"), param(model.params, "head.b"));
                const std::size_t truth = tax.l3_index(store.record(id).l3_label);
                batch_loss += cross_entropy_loss(res.scores, truth);
                auto dscores = cross_entropy_grad(res.scores, truth);
                for (double& g : dscores) g *= inv_b;
                const auto de = detail::classifier_backward(cache.embedding, param(model.params, "head.w"), dscores, grads);
                tiny_backward(model.spec, model.params, cache, de, grads);
            }
            batch_loss *= inv_b;
            if (!std::isfinite(batch_loss))
                fail("training: non-finite loss at epoch " + fmt_int(static_cast<long long>(epoch)) + "; aborting");
            opt.step(model.params, grads);
            epoch_loss += batch_loss * static_cast<double>(batch.size());
            n_seen += batch.size();
        }
        const auto vs = detail::classifier_val_stats(model, store, val_ids, tax);
        out.record.epochs.push_back({epoch, epoch_loss / static_cast<double>(n_seen), vs.loss, vs.top1});
        if (vs.top1 > best_top1) {
            best_top1 = vs.top1;
            out.best_model = model;
            out.record.best_epoch = epoch;
        }
    }
    out.final_model = std::move(model);
    if (config.epochs == 0) out.best_model = out.final_model;
    return out;
}

// ---------------------------------------------------------------------------
// SupCon stage 1: encoder + projection head under the contrastive loss, with
// two independently augmented views per sample (the effective contrastive
// batch is twice the configured batch size).
// ---------------------------------------------------------------------------

inline TrainOutput pretrain_supcon(const TrainConfig& config, const DatasetManifest& manifest,
                                   const SplitAssignment& split, const EncoderSpec& spec, const Taxonomy& tax) {
    if (config.paradigm != Paradigm::supcon) fail("training: pretrain_supcon requires the supcon paradigm");
    detail::require_valid_config(config);
    validate_encoder_spec(spec);
    detail::require_io_sizes(config, spec);
    if (spec.kind != EncoderKind::reference_tiny) fail("training: only the reference_tiny encoder is trainable in-process");

    const auto train_ids = split_ids(manifest, split, Split::train);
    const auto val_ids = split_ids(manifest, split, Split::val);
    if (train_ids.empty()) fail("training: train split is empty");

    Model model;
    model.spec = spec;
    model.class_order = tax.l3_order();
    model.params = reference_tiny_init(spec, config.seed);
    const std::size_t hidden = config.projection_hidden == 0 ? spec.embed_dim : config.projection_hidden;
    install_projection(model, init_projection_head(spec.embed_dim, hidden, config.projection_dim, config.seed));

    ImageStore store(manifest);
    AdamW opt(config.learning_rate, config.weight_decay);
    TrainOutput out;
    out.best_model = model;
    double best_val = std::numeric_limits<double>::infinity();

    auto run_views = [&](const std::vector<std::string>& batch, std::size_t epoch, bool with_grad, ParamMap* grads,
                         double* loss_out) {
        const std::size_t n_views = batch.size() * 2;
        std::vector<TinyCache> caches(n_views);
        std::vector<ProjectionCache> pcaches(n_views);
        std::vector<std::vector<double>> projections(n_views);
        std::vector<int> labels(n_views);
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const FloatImage img = store.load(batch[s]);
            const int label = static_cast<int>(tax.l3_index(store.record(batch[s]).l3_label));
            for (std::size_t v = 0; v < 2; ++v) {
                const std::size_t slot = s * 2 + v;
                Rng aug_rng(derive_seed(config.seed, "aug/" + batch[s] + "/view" + fmt_int(static_cast<long long>(v)), epoch));
                const FloatImage x = augment(img, config.augmentation, aug_rng);
                caches[slot] = tiny_forward(model.spec, model.params, x);
                projections[slot] = project_core(caches[slot].embedding, param(model.params, "proj.w1"),
                                                 param(model.params, "proj.b1"), param(model.params, "proj.w2"),
                                                 param(model.params, "proj.b2"), &pcaches[slot]);
                labels[slot] = label;
            }
        }
        Matrix dz;
        const double loss = supcon_loss(projections, labels, config.temperature, with_grad ? &dz : nullptr);
        if (loss_out) *loss_out = loss;
        if (with_grad) {
            for (std::size_t slot = 0; slot < n_views; ++slot) {
                std::vector<double> dzi(dz.row_ptr(slot), dz.row_ptr(slot) + dz.cols);
                const auto de = projection_backward(caches[slot].embedding, param(model.params, "proj.w1"),
                                                    param(model.params, "proj.w2"), pcaches[slot], dzi, *grads);
                tiny_backward(model.spec, model.params, caches[slot], de, *grads);
            }
        }
    };

    auto val_loss = [&](std::size_t epoch) {
        if (val_ids.empty()) return std::numeric_limits<double>::quiet_NaN();
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& batch : detail::batches_for_epoch(val_ids, config.batch_size, config.seed ^ 0x5a5a, epoch)) {
            double l = 0.0;
            run_views(batch, epoch, false, nullptr, &l);
            total += l * static_cast<double>(batch.size());
            n += batch.size();
        }
        return total / static_cast<double>(n);
    };

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t n_seen = 0;
        for (auto batch : detail::batches_for_epoch(train_ids, config.batch_size, config.seed, epoch)) {
            ParamMap grads;
            double batch_loss = 0.0;
            try {
                run_views(batch, epoch, true, &grads, &batch_loss);
            } catch (const Error& e) {
                if (std::string(e.what()).find("degenerate contrastive batch") == std::string::npos) throw;
                // One resample of the batch composition, then give up.
                Rng resample(derive_seed(config.seed, "resample", epoch));
                std::vector<std::string> redraw = train_ids;
                resample.shuffle(redraw);
                redraw.resize(std::min(redraw.size(), batch.size()));
                grads.clear();
                run_views(redraw, epoch, true, &grads, &batch_loss);
            }
            if (!std::isfinite(batch_loss))
                fail("training: non-finite supcon loss at epoch " + fmt_int(static_cast<long long>(epoch)) + "; aborting");
            opt.step(model.params, grads);
            epoch_loss += batch_loss * static_cast<double>(batch.size());
            n_seen += batch.size();
        }
        const double vl = val_loss(epoch);
        out.record.epochs.push_back({epoch, epoch_loss / static_cast<double>(n_seen), vl,
                                     std::numeric_limits<double>::quiet_NaN()});
        if (!std::isnan(vl) && vl < best_val) {
            best_val = vl;
            out.best_model = model;
            out.record.best_epoch = epoch;
        }
    }
    out.final_model = std::move(model);
    if (config.epochs == 0 || std::isinf(best_val)) out.best_model = out.final_model;
    return out;
}

// ---------------------------------------------------------------------------
// SupCon stage 2: frozen encoder, fresh linear classifier under
// cross-entropy. Encoder tensors are never touched, so they stay bitwise
// identical to the input checkpoint.
// ---------------------------------------------------------------------------

inline TrainOutput linear_probe(const Model& encoder_model, const TrainConfig& config, const DatasetManifest& manifest,
                                const SplitAssignment& split, const Taxonomy& tax) {
    detail::require_valid_config(config);
    detail::require_io_sizes(config, encoder_model.spec);
    if (encoder_model.spec.kind != EncoderKind::reference_tiny)
        fail("training: only the reference_tiny encoder is trainable in-process");
    if (!encoder_model.has_param("encoder.embed.w")) fail("training: encoder checkpoint has no encoder parameters");

    const auto train_ids = split_ids(manifest, split, Split::train);
    const auto val_ids = split_ids(manifest, split, Split::val);
    if (train_ids.empty()) fail("training: train split is empty");
    if (config.epochs > 0 && val_ids.empty()) fail("training: validation split is empty");

    Model model;
    model.spec = encoder_model.spec;
    model.class_order = tax.l3_order();
    for (const auto& [name, m] : encoder_model.params)
        if (name.rfind("encoder.", 0) == 0) model.params.emplace(name, m);
    const auto head = init_classifier_head(model.spec.embed_dim, model.class_order, config.seed);
    if (head.w.rows != model.spec.embed_dim) fail("training: classifier does not match encoder embed_dim");
    install_classifier(model, head);

    ImageStore store(manifest);
    AdamW opt(config.learning_rate, config.weight_decay);
    TrainOutput out;
    out.best_model = model;
    double best_top1 = -1.0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t n_seen = 0;
        for (const auto& batch : detail::batches_for_epoch(train_ids, config.batch_size, config.seed, epoch)) {
            ParamMap grads;
            double batch_loss = 0.0;
            const double inv_b = 1.0 / static_cast<double>(batch.size());
            for (const auto& id : batch) {
                Rng aug_rng(derive_seed(config.seed, "aug/" + id, epoch));
                const FloatImage x = augment(store.load(id), config.augmentation, aug_rng);
                const auto emb = tiny_forward(model.spec, model.params, x).embedding;
                const auto res = classify_core(emb, param(model.params, "head.w"), param(model.params, "head.b"));
                const std::size_t truth = tax.l3_index(store.record(id).l3_label);
                batch_loss += cross_entropy_loss(res.scores, truth);
                auto dscores = cross_entropy_grad(res.scores, truth);
                for (double& g : dscores) g *= inv_b;
                detail::classifier_backward(emb, param(model.params, "head.w"), dscores, grads);
            }
            batch_loss *= inv_b;
            if (!std::isfinite(batch_loss))
                fail("training: non-finite loss at epoch " + fmt_int(static_cast<long long>(epoch)) + "; aborting");
            opt.step(model.params, grads); // grads only carry head.* entries
            epoch_loss += batch_loss * static_cast<double>(batch.size());
            n_seen += batch.size();
        }
        const auto vs = detail::classifier_val_stats(model, store, val_ids, tax);
        out.record.epochs.push_back({epoch, epoch_loss / static_cast<double>(n_seen), vs.loss, vs.top1});
        if (vs.top1 > best_top1) {
            best_top1 = vs.top1;
            out.best_model = model;
            out.record.best_epoch = epoch;
        }
    }
    out.final_model = std::move(model);
    if (config.epochs == 0) out.best_model = out.final_model;
    return out;
}

// ---------------------------------------------------------------------------
// Inference over a subset: full rankings with scores from the classifier.
// ---------------------------------------------------------------------------

inline std::vector<PredictionRecord> predict_records(const Model& model, const DatasetManifest& manifest,
                                                     const SplitAssignment* split, Split subset, const Taxonomy& tax) {
    if (!model.has_classifier()) fail("training: model has no classifier head");
    if (model.class_order.empty()) fail("training: model has no class order");
    ImageStore store(manifest);
    std::vector<PredictionRecord> out;
    for (const auto& r : manifest.records) {
        if (split && split->at(r.sample_id) != subset) continue;
        const FloatImage x = eval_transform(store.load(r.sample_id), model.spec.input_size);
        std::vector<double> emb;
        if (model.spec.kind == EncoderKind::external)
            emb = encode_image(model, x);
        else
            emb = tiny_forward(model.spec, model.params, x).embedding;
        const auto res = classify_core(emb, param(model.params, "head.w"), param(model.params, "head.b"));
        PredictionRecord rec;
        rec.sample_id = r.sample_id;
        rec.true_class = r.l3_label;
        rec.ranked_classes = ranking_from_scores(res.probabilities, model.class_order);
        // scores stored in ranked order
        std::map<std::string, double> by_code;
        for (std::size_t i = 0; i < model.class_order.size(); ++i) by_code[model.class_order[i]] = res.probabilities[i];
        for (const auto& c : rec.ranked_classes) rec.scores.push_back(by_code[c]);
        validate_record(rec, tax);
        out.push_back(std::move(rec));
    }
    return out;
}

} // namespace habitat
