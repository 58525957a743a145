#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "habitat/checkpoint.hpp"
#include "habitat/common.hpp"
#include "habitat/dataset.hpp"
#include "habitat/embedding.hpp"
#include "habitat/expert.hpp"
#include "habitat/gradcam.hpp"
#include "habitat/heatmap.hpp"
#include "habitat/metrics.hpp"
#include "habitat/model.hpp"
#include "habitat/predictions.hpp"
#include "habitat/taxonomy.hpp"
#include "habitat/training.hpp"

namespace habitat::cli {

inline constexpr int kRunConfigFormatVersion = 1;

/// Persisted description of one CLI invocation: the command, every parameter
/// as an explicit key, the seed and the output directory. Replaying a
/// RunConfig reproduces all deterministic artifacts byte for byte.
struct RunConfig {
    int format_version = kRunConfigFormatVersion;
    std::string command;
    std::vector<std::pair<std::string, std::vector<std::string>>> params;
    bool has_seed = false;
    std::uint64_t seed = 0;
    std::string out_dir;

    void add(const std::string& key, const std::string& value) { params.push_back({key, {value}}); }
    void add_list(const std::string& key, const std::vector<std::string>& values) {
        if (!values.empty()) params.push_back({key, values});
    }
};

inline nlohmann::ordered_json run_config_to_json(const RunConfig& rc) {
    nlohmann::ordered_json j;
    j["format_version"] = rc.format_version;
    j["command"] = rc.command;
    nlohmann::ordered_json params = nlohmann::ordered_json::object();
    for (const auto& [key, values] : rc.params) {
        if (values.size() == 1)
            params[key] = values[0];
        else
            params[key] = values;
    }
    j["params"] = params;
    if (rc.has_seed) j["seed"] = rc.seed;
    j["out"] = rc.out_dir;
    return j;
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& rc) {
    std::ofstream out(path);
    if (!out) fail("cli: cannot write " + path.string());
    out << run_config_to_json(rc).dump(2) << "\n";
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail("cli: cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("cli: malformed run config " + path.string() + ": " + e.what());
    }
    RunConfig rc;
    rc.format_version = j.value("format_version", 0);
    if (rc.format_version != kRunConfigFormatVersion) fail("cli: unsupported run config format version");
    rc.command = j.at("command").get<std::string>();
    for (const auto& [key, value] : j.at("params").items()) {
        if (value.is_array())
            rc.params.push_back({key, value.get<std::vector<std::string>>()});
        else
            rc.params.push_back({key, {value.get<std::string>()}});
    }
    if (j.contains("seed")) {
        rc.has_seed = true;
        rc.seed = j.at("seed").get<std::uint64_t>();
    }
    rc.out_dir = j.at("out").get<std::string>();
    return rc;
}

inline std::vector<std::string> run_config_argv(const RunConfig& rc) {
    std::vector<std::string> argv{rc.command};
    for (const auto& [key, values] : rc.params)
        for (const auto& v : values) {
            argv.push_back("--" + key);
            argv.push_back(v);
        }
    if (rc.has_seed) {
        argv.push_back("--seed");
        argv.push_back(std::to_string(rc.seed));
    }
    argv.push_back("--out");
    argv.push_back(rc.out_dir);
    return argv;
}

namespace detail {

inline Taxonomy taxonomy_from_option(const std::string& path) {
    return path.empty() ? default_taxonomy() : load_taxonomy(path);
}

inline std::filesystem::path prepare_out_dir(const std::string& out, const RunConfig& rc) {
    if (out.empty()) fail("cli: --out is required");
    std::filesystem::path dir(out);
    std::filesystem::create_directories(dir);
    save_run_config(dir / "run_config.json", rc);
    return dir;
}

inline Level parse_level(const std::string& s) {
    if (s == "l3" || s == "L3") return Level::L3;
    if (s == "l2" || s == "L2") return Level::L2;
    fail("cli: unknown level '" + s + "' (expected l3 or l2)");
}

// When set, collects validation diagnostics for validate_config() instead of
// only surfacing them through the thrown error.
inline thread_local std::vector<std::string>* diag_sink = nullptr;

inline void emit_diagnostics(const std::vector<std::string>& diags) {
    if (diag_sink) *diag_sink = diags;
    if (diags.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& d : diags) msg += "\n  - " + d;
    fail(msg);
}

struct StageTimer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

} // namespace detail

// ---------------------------------------------------------------------------
// Per-command option structs, validation, execution
// ---------------------------------------------------------------------------

struct ToydataOpts {
    std::size_t classes = 4;
    std::size_t per_class = 50;
    int size = 64;
    std::string difficulty = "separable";
    std::string taxonomy;
    std::uint64_t seed = 0;
    std::string out;
};

inline std::vector<std::string> validate_toydata(const ToydataOpts& o) {
    std::vector<std::string> diags;
    if (o.classes < 2) diags.push_back("toydata needs at least 2 classes");
    if (o.classes > 18) diags.push_back("toydata supports at most 18 classes");
    if (o.per_class < 1) diags.push_back("per-class count must be positive");
    if (o.size < 8) diags.push_back("image size must be at least 8");
    if (o.difficulty != "separable" && o.difficulty != "confusable-pair")
        diags.push_back("difficulty must be 'separable' or 'confusable-pair'");
    return diags;
}

inline RunConfig toydata_run_config(const ToydataOpts& o) {
    RunConfig rc;
    rc.command = "toydata";
    rc.add("classes", fmt_int(static_cast<long long>(o.classes)));
    rc.add("per-class", fmt_int(static_cast<long long>(o.per_class)));
    rc.add("size", fmt_int(o.size));
    rc.add("difficulty", o.difficulty);
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.has_seed = true;
    rc.seed = o.seed;
    rc.out_dir = o.out;
    return rc;
}

inline void run_toydata(const ToydataOpts& o) {
    detail::emit_diagnostics(validate_toydata(o));
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, toydata_run_config(o));
    ToyDatasetSpec spec;
    spec.n_classes = o.classes;
    spec.n_per_class = o.per_class;
    spec.image_size = o.size;
    spec.difficulty = o.difficulty == "separable" ? ToyDifficulty::separable : ToyDifficulty::confusable_pair;
    spec.seed = o.seed;
    const auto manifest = generate_toy_dataset(spec, dir / "images", tax);
    DatasetManifest rel = manifest;
    for (auto& r : rel.records) r.image_ref = "images/" + r.image_ref;
    save_manifest(dir / "manifest.csv", rel);
    std::cout << "toydata: wrote " << rel.records.size() << " images under " << (dir / "images").string() << "\n";
}

struct SplitOpts {
    std::string manifest;
    double train = 0.75;
    double val = 0.20;
    double test = 0.25;
    std::size_t min_test_count = 4;
    std::string taxonomy;
    std::uint64_t seed = 0;
    std::string out;
};

inline std::vector<std::string> validate_split_opts(const SplitOpts& o) {
    std::vector<std::string> diags;
    auto in01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in01(o.train)) diags.push_back("train fraction must lie in (0,1)");
    if (!in01(o.val)) diags.push_back("val fraction must lie in (0,1)");
    if (!in01(o.test)) diags.push_back("test fraction must lie in (0,1)");
    if (std::abs(o.train + o.test - 1.0) > 1e-9) diags.push_back("train and test fractions must sum to 1");
    if (o.manifest.empty()) diags.push_back("--manifest is required");
    return diags;
}

inline RunConfig split_run_config(const SplitOpts& o) {
    RunConfig rc;
    rc.command = "split";
    rc.add("manifest", o.manifest);
    rc.add("train", fmt_double(o.train));
    rc.add("val", fmt_double(o.val));
    rc.add("test", fmt_double(o.test));
    rc.add("min-test-count", fmt_int(static_cast<long long>(o.min_test_count)));
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.has_seed = true;
    rc.seed = o.seed;
    rc.out_dir = o.out;
    return rc;
}

inline void run_split(const SplitOpts& o) {
    detail::emit_diagnostics(validate_split_opts(o));
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, split_run_config(o));
    const auto manifest = load_manifest(o.manifest);
    SplitFractions fr{o.train, o.val, o.test};
    const auto assignment = stratified_split(manifest, tax, fr, o.min_test_count, o.seed);
    save_split(dir / "split.csv", assignment);
    std::cout << "split: train=" << assignment.count(Split::train) << " val=" << assignment.count(Split::val)
              << " test=" << assignment.count(Split::test) << "\n";
}

struct TrainOpts {
    std::string paradigm = "supervised";
    std::string manifest;
    std::string split;
    std::string preset = "toy";
    std::string stage = "both"; // supcon: pretrain | probe | both
    std::string encoder_checkpoint; // supcon probe-only
    double lr = -1.0;
    double weight_decay = -1.0;
    long long batch = -1;
    long long epochs = -1;
    double tau = -1.0;
    long long resize = -1;
    long long crop = -1;
    double rotate_deg = -1.0;
    std::size_t embed_dim = 32;
    int patch = 8;
    std::size_t proj_dim = 128;
    std::size_t proj_hidden = 0;
    std::string taxonomy;
    std::uint64_t seed = 0;
    std::string out;

    // Flags default to negative sentinels, so any user-supplied value
    // (including an invalid zero) overrides the preset and hits validation.
    TrainConfig resolve_config() const {
        TrainConfig c = preset == "full" ? full_scale_train_defaults() : toy_train_defaults();
        c.paradigm = parse_paradigm(paradigm);
        if (lr >= 0.0) c.learning_rate = lr;
        if (weight_decay >= 0.0) c.weight_decay = weight_decay;
        if (batch >= 0) c.batch_size = static_cast<std::size_t>(batch);
        if (epochs >= 0) c.epochs = static_cast<std::size_t>(epochs);
        if (tau >= 0.0) c.temperature = tau;
        int resize_to = resize > 0 ? static_cast<int>(resize) : c.augmentation.resize_to;
        int crop_to = crop > 0 ? static_cast<int>(crop) : c.augmentation.output_size();
        double rot = rotate_deg >= 0.0 ? rotate_deg : 10.0;
        c.augmentation = AugmentationConfig::standard(resize_to, crop_to, rot, 0);
        c.projection_dim = proj_dim;
        c.projection_hidden = proj_hidden;
        c.seed = seed;
        return c;
    }

    EncoderSpec resolve_spec() const {
        EncoderSpec s;
        s.kind = EncoderKind::reference_tiny;
        s.embed_dim = embed_dim;
        s.patch_size = patch;
        s.input_size = resolve_config().augmentation.output_size();
        return s;
    }
};

inline std::vector<std::string> validate_train_opts(const TrainOpts& o) {
    std::vector<std::string> diags;
    if (o.manifest.empty()) diags.push_back("--manifest is required");
    if (o.paradigm != "supervised" && o.paradigm != "supcon") diags.push_back("paradigm must be supervised or supcon");
    if (o.preset != "toy" && o.preset != "full") diags.push_back("preset must be toy or full");
    if (o.stage != "both" && o.stage != "pretrain" && o.stage != "probe") diags.push_back("stage must be both, pretrain or probe");
    if (o.stage == "probe" && o.encoder_checkpoint.empty()) diags.push_back("probe stage needs --encoder-checkpoint");
    if (o.paradigm == "supervised" && o.stage != "both") diags.push_back("stages apply to the supcon paradigm only");
    if (o.split.empty()) diags.push_back("--split is required");
    TrainConfig c;
    try {
        c = o.resolve_config();
    } catch (const Error& e) {
        diags.push_back(e.what());
        return diags;
    }
    for (const auto& d : validate_train_config(c)) diags.push_back(d);
    EncoderSpec s;
    try {
        s = o.resolve_spec();
        validate_encoder_spec(s);
    } catch (const Error& e) {
        diags.push_back(e.what());
    }
    return diags;
}

inline RunConfig train_run_config(const TrainOpts& o) {
    RunConfig rc;
    rc.command = "train";
    rc.add("paradigm", o.paradigm);
    rc.add("manifest", o.manifest);
    rc.add("split", o.split);
    rc.add("preset", o.preset);
    if (o.paradigm == "supcon") rc.add("stage", o.stage);
    if (!o.encoder_checkpoint.empty()) rc.add("encoder-checkpoint", o.encoder_checkpoint);
    if (o.lr >= 0.0) rc.add("lr", fmt_double(o.lr));
    if (o.weight_decay >= 0.0) rc.add("weight-decay", fmt_double(o.weight_decay));
    if (o.batch >= 0) rc.add("batch", fmt_int(o.batch));
    if (o.epochs >= 0) rc.add("epochs", fmt_int(o.epochs));
    if (o.tau >= 0.0) rc.add("tau", fmt_double(o.tau));
    if (o.resize > 0) rc.add("resize", fmt_int(o.resize));
    if (o.crop > 0) rc.add("crop", fmt_int(o.crop));
    if (o.rotate_deg >= 0.0) rc.add("rotate-deg", fmt_double(o.rotate_deg));
    rc.add("embed-dim", fmt_int(static_cast<long long>(o.embed_dim)));
    rc.add("patch", fmt_int(o.patch));
    rc.add("proj-dim", fmt_int(static_cast<long long>(o.proj_dim)));
    rc.add("proj-hidden", fmt_int(static_cast<long long>(o.proj_hidden)));
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.has_seed = true;
    rc.seed = o.seed;
    rc.out_dir = o.out;
    return rc;
}

inline void run_train(const TrainOpts& o) {
    detail::emit_diagnostics(validate_train_opts(o));
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, train_run_config(o));
    const auto manifest = load_manifest(o.manifest);
    const auto assignment = load_split(o.split);
    const TrainConfig config = o.resolve_config();
    const EncoderSpec spec = o.resolve_spec();

    {
        std::ofstream cfg(dir / "config.json");
        nlohmann::ordered_json j = train_config_to_json(config);
        j["encoder_spec"] = encoder_spec_to_json(spec);
        cfg << j.dump(2) << "\n";
    }

    detail::StageTimer timer;
    nlohmann::ordered_json meta;
    meta["command"] = "train";
    meta["paradigm"] = o.paradigm;

    if (config.paradigm == Paradigm::supervised) {
        auto outp = train_supervised(config, manifest, assignment, spec, tax);
        save_run_record(dir / "run_record.csv", outp.record);
        save_checkpoint(dir / "checkpoint_final.hbc", outp.final_model);
        save_checkpoint(dir / "checkpoint_best.hbc", outp.best_model);
        write_ppm(dir / "curves.ppm", render_training_curves(outp.record));
        meta["best_epoch"] = outp.record.best_epoch;
        meta["checkpoints"] = {"checkpoint_best.hbc", "checkpoint_final.hbc"};
        if (!outp.record.epochs.empty()) meta["final_val_top1"] = outp.record.epochs.back().val_top1;
    } else {
        Model encoder_model;
        std::vector<std::string> checkpoint_refs;
        if (o.stage == "probe") {
            encoder_model = load_checkpoint(o.encoder_checkpoint);
        } else {
            auto pre = pretrain_supcon(config, manifest, assignment, spec, tax);
            save_run_record(dir / "pretrain_record.csv", pre.record);
            save_checkpoint(dir / "encoder_pretrained.hbc", pre.final_model);
            save_checkpoint(dir / "encoder_pretrained_best.hbc", pre.best_model);
            meta["pretrain_best_epoch"] = pre.record.best_epoch;
            checkpoint_refs.push_back("encoder_pretrained.hbc");
            checkpoint_refs.push_back("encoder_pretrained_best.hbc");
            encoder_model = std::move(pre.final_model);
        }
        if (o.stage != "pretrain") {
            auto probe = linear_probe(encoder_model, config, manifest, assignment, tax);
            save_run_record(dir / "run_record.csv", probe.record);
            save_checkpoint(dir / "checkpoint_final.hbc", probe.final_model);
            save_checkpoint(dir / "checkpoint_best.hbc", probe.best_model);
            write_ppm(dir / "curves.ppm", render_training_curves(probe.record));
            meta["best_epoch"] = probe.record.best_epoch;
            checkpoint_refs.push_back("checkpoint_best.hbc");
            checkpoint_refs.push_back("checkpoint_final.hbc");
            if (!probe.record.epochs.empty()) meta["final_val_top1"] = probe.record.epochs.back().val_top1;
        }
        meta["checkpoints"] = checkpoint_refs;
    }
    meta["wall_clock_sec"] = timer.seconds();
    std::ofstream mf(dir / "run_meta.json");
    mf << meta.dump(2) << "\n";
    std::cout << "train: artifacts written to " << dir.string() << "\n";
}

struct EvalOpts {
    std::string predictions;
    std::string checkpoint;
    std::string manifest;
    std::string split;
    std::string subset = "test";
    std::string level = "l3";
    std::string taxonomy;
    std::string out;
};

inline std::vector<std::string> validate_eval_opts(const EvalOpts& o) {
    std::vector<std::string> diags;
    const bool from_file = !o.predictions.empty();
    const bool from_model = !o.checkpoint.empty();
    if (from_file == from_model) diags.push_back("exactly one of --predictions or --checkpoint is required");
    if (from_model && (o.manifest.empty() || o.split.empty()))
        diags.push_back("--checkpoint evaluation needs --manifest and --split");
    if (o.subset != "train" && o.subset != "val" && o.subset != "test") diags.push_back("subset must be train, val or test");
    if (o.level != "l3" && o.level != "l2") diags.push_back("level must be l3 or l2");
    return diags;
}

inline RunConfig eval_run_config(const EvalOpts& o) {
    RunConfig rc;
    rc.command = "eval";
    if (!o.predictions.empty()) rc.add("predictions", o.predictions);
    if (!o.checkpoint.empty()) rc.add("checkpoint", o.checkpoint);
    if (!o.manifest.empty()) rc.add("manifest", o.manifest);
    if (!o.split.empty()) rc.add("split", o.split);
    rc.add("subset", o.subset);
    rc.add("level", o.level);
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.out_dir = o.out;
    return rc;
}

inline std::vector<PredictionRecord> eval_records(const EvalOpts& o, const Taxonomy& tax) {
    std::vector<PredictionRecord> records;
    if (!o.predictions.empty()) {
        records = load_predictions(o.predictions);
        for (const auto& r : records) validate_record(r, tax);
    } else {
        const auto model = load_checkpoint(o.checkpoint);
        const auto manifest = load_manifest(o.manifest);
        const auto assignment = load_split(o.split);
        records = predict_records(model, manifest, &assignment, parse_split(o.subset), tax);
    }
    if (records.empty()) fail("cli: no prediction records to evaluate");
    return records;
}

inline void run_eval(const EvalOpts& o) {
    detail::emit_diagnostics(validate_eval_opts(o));
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, eval_run_config(o));
    auto records = eval_records(o, tax);
    if (!o.checkpoint.empty()) save_predictions(dir / "predictions.csv", records);
    std::vector<std::string> order = tax.l3_order();
    if (detail::parse_level(o.level) == Level::L2) {
        records = aggregate_to_l2(records, tax);
        order = tax.l2_order();
    }
    const auto report = compute_metrics(records, order);
    save_metrics(dir / "metrics.json", report);
    std::cout << "eval: top1=" << fmt_double(report.top1) << " mcc=" << fmt_double(report.mcc)
              << " weighted_f1=" << fmt_double(report.weighted_f1) << "\n";
}

struct CmOpts {
    std::string predictions;
    std::string level = "l3";
    std::string taxonomy;
    std::string out;
};

inline RunConfig cm_run_config(const CmOpts& o) {
    RunConfig rc;
    rc.command = "cm";
    rc.add("predictions", o.predictions);
    rc.add("level", o.level);
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.out_dir = o.out;
    return rc;
}

inline void run_cm(const CmOpts& o) {
    std::vector<std::string> diags;
    if (o.predictions.empty()) diags.push_back("--predictions is required");
    if (o.level != "l3" && o.level != "l2") diags.push_back("level must be l3 or l2");
    detail::emit_diagnostics(diags);
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, cm_run_config(o));
    auto records = load_predictions(o.predictions);
    for (const auto& r : records) validate_record(r, tax);
    std::vector<std::string> order = tax.l3_order();
    if (detail::parse_level(o.level) == Level::L2) {
        records = aggregate_to_l2(records, tax);
        order = tax.l2_order();
    }
    auto cm = confusion_matrix(records, order, CmNormalization::none);
    save_confusion_matrix(dir / "cm_counts.csv", cm);
    cm.normalization = CmNormalization::per_true_class;
    save_confusion_matrix(dir / "cm_normalized.csv", cm);
    write_ppm(dir / "cm_heatmap.ppm", render_matrix_heatmap(cm.values(), /*diverging=*/false));
    std::cout << "cm: wrote counts, normalized matrix and heatmap to " << dir.string() << "\n";
}

struct CmDeltaOpts {
    std::string a;
    std::string b;
    std::string out;
};

inline RunConfig cm_delta_run_config(const CmDeltaOpts& o) {
    RunConfig rc;
    rc.command = "cm-delta";
    rc.add("a", o.a);
    rc.add("b", o.b);
    rc.out_dir = o.out;
    return rc;
}

inline void run_cm_delta(const CmDeltaOpts& o) {
    std::vector<std::string> diags;
    if (o.a.empty()) diags.push_back("--a is required");
    if (o.b.empty()) diags.push_back("--b is required");
    detail::emit_diagnostics(diags);
    const auto dir = detail::prepare_out_dir(o.out, cm_delta_run_config(o));
    const auto ma = load_matrix_csv(o.a);
    const auto mb = load_matrix_csv(o.b);
    if (ma.class_order != mb.class_order) fail("cli: delta matrices have different class orders");
    if (ma.normalization_tag != mb.normalization_tag) fail("cli: delta matrices have different normalizations");
    std::vector<std::vector<double>> delta(ma.values.size(), std::vector<double>(ma.values.size(), 0.0));
    for (std::size_t i = 0; i < ma.values.size(); ++i)
        for (std::size_t j = 0; j < ma.values.size(); ++j) delta[i][j] = ma.values[i][j] - mb.values[i][j];
    save_matrix_csv(dir / "delta.csv", ma.class_order, delta, "delta(" + ma.normalization_tag + ")");
    write_ppm(dir / "delta_heatmap.ppm", render_matrix_heatmap(delta, /*diverging=*/true));
    std::cout << "cm-delta: wrote delta matrix and heatmap to " << dir.string() << "\n";
}

struct EmbedOpts {
    std::string checkpoint;
    std::string manifest;
    std::string split;
    std::string subset = "test";
    std::string taxonomy;
    std::string out;
};

inline RunConfig embed_run_config(const EmbedOpts& o) {
    RunConfig rc;
    rc.command = "embed";
    rc.add("checkpoint", o.checkpoint);
    rc.add("manifest", o.manifest);
    rc.add("split", o.split);
    rc.add("subset", o.subset);
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.out_dir = o.out;
    return rc;
}

inline void run_embed(const EmbedOpts& o) {
    std::vector<std::string> diags;
    if (o.checkpoint.empty()) diags.push_back("--checkpoint is required");
    if (o.manifest.empty()) diags.push_back("--manifest is required");
    if (o.split.empty()) diags.push_back("--split is required");
    if (o.subset != "train" && o.subset != "val" && o.subset != "test") diags.push_back("subset must be train, val or test");
    detail::emit_diagnostics(diags);
    const auto dir = detail::prepare_out_dir(o.out, embed_run_config(o));
    const auto model = load_checkpoint(o.checkpoint);
    const auto manifest = load_manifest(o.manifest);
    const auto assignment = load_split(o.split);
    ExportStats stats;
    const auto set = export_embeddings(model, manifest, &assignment, parse_split(o.subset), &stats,
                                       [](const std::string& m) { std::cerr << m << "\n"; });
    save_embeddings(dir / "embeddings.bin", set);
    std::cout << "embed: wrote " << set.n() << "x" << set.dim() << " embeddings (" << stats.skipped_unreadable
              << " unreadable skipped)\n";
}

struct ClusterQualityOpts {
    std::string embeddings;
    std::string taxonomy;
    std::string out;
};

inline RunConfig cluster_quality_run_config(const ClusterQualityOpts& o) {
    RunConfig rc;
    rc.command = "cluster-quality";
    rc.add("embeddings", o.embeddings);
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.out_dir = o.out;
    return rc;
}

inline void run_cluster_quality(const ClusterQualityOpts& o) {
    std::vector<std::string> diags;
    if (o.embeddings.empty()) diags.push_back("--embeddings is required");
    detail::emit_diagnostics(diags);
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, cluster_quality_run_config(o));
    const auto set = load_embeddings(o.embeddings);
    const auto quality = grouped_quality(set, tax);
    std::ofstream out(dir / "cluster_quality.json");
    out << grouped_quality_to_json(quality).dump(2) << "\n";
    std::cout << "cluster-quality: " << quality.reports.size() << " reports, " << quality.skipped.size()
              << " groups skipped\n";
}

struct GradcamOpts {
    std::string checkpoint;
    std::vector<std::string> images;
    std::string target_class;
    std::string layer = "block1";
    std::string taxonomy;
    std::string out;
};

inline RunConfig gradcam_run_config(const GradcamOpts& o) {
    RunConfig rc;
    rc.command = "gradcam";
    rc.add("checkpoint", o.checkpoint);
    rc.add_list("image", o.images);
    rc.add("target-class", o.target_class);
    rc.add("layer", o.layer);
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.out_dir = o.out;
    return rc;
}

inline void run_gradcam(const GradcamOpts& o) {
    std::vector<std::string> diags;
    if (o.checkpoint.empty()) diags.push_back("--checkpoint is required");
    if (o.images.empty()) diags.push_back("at least one --image is required");
    if (o.target_class.empty()) diags.push_back("--target-class is required");
    detail::emit_diagnostics(diags);
    const auto dir = detail::prepare_out_dir(o.out, gradcam_run_config(o));
    const auto model = load_checkpoint(o.checkpoint);
    for (std::size_t i = 0; i < o.images.size(); ++i) {
        const FloatImage img = load_float_image(o.images[i]);
        const auto map = gradcam(model, img, o.target_class, o.layer);
        const Image base = to_bytes(eval_transform(img, model.spec.input_size));
        const std::string stem = std::filesystem::path(o.images[i]).stem().string();
        char idx[8];
        std::snprintf(idx, sizeof(idx), "%03zu", i);
        write_ppm(dir / ("overlay_" + std::string(idx) + "_" + stem + ".ppm"), overlay(map, base));
        save_saliency_grid(dir / ("grid_" + std::string(idx) + "_" + stem + ".csv"), map);
    }
    std::cout << "gradcam: wrote " << o.images.size() << " overlays to " << dir.string() << "\n";
}

struct ExpertSubsetOpts {
    std::string manifest;
    std::string split;
    double fraction = 0.1;
    std::string taxonomy;
    std::uint64_t seed = 0;
    std::string out;
};

inline RunConfig expert_subset_run_config(const ExpertSubsetOpts& o) {
    RunConfig rc;
    rc.command = "expert-subset";
    rc.add("manifest", o.manifest);
    rc.add("split", o.split);
    rc.add("fraction", fmt_double(o.fraction));
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.has_seed = true;
    rc.seed = o.seed;
    rc.out_dir = o.out;
    return rc;
}

inline void run_expert_subset(const ExpertSubsetOpts& o) {
    std::vector<std::string> diags;
    if (o.manifest.empty()) diags.push_back("--manifest is required");
    if (o.split.empty()) diags.push_back("--split is required");
    if (!(o.fraction > 0.0) || o.fraction > 1.0) diags.push_back("fraction must lie in (0,1]");
    detail::emit_diagnostics(diags);
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, expert_subset_run_config(o));
    const auto manifest = load_manifest(o.manifest);
    const auto assignment = load_split(o.split);
    const auto ids = draw_expert_subset(manifest, assignment, o.fraction, o.seed, tax);
    DatasetManifest subset;
    subset.base_dir = manifest.base_dir;
    std::set<std::string> chosen(ids.begin(), ids.end());
    for (const auto& r : manifest.records)
        if (chosen.count(r.sample_id)) subset.records.push_back(r);
    save_manifest(dir / "subset.csv", subset);
    std::cout << "expert-subset: drew " << subset.records.size() << " samples\n";
}

struct ExpertScoreOpts {
    std::string annotations;
    std::string predictions;
    std::string subset_manifest;
    std::string taxonomy;
    std::string out;
};

inline RunConfig expert_score_run_config(const ExpertScoreOpts& o) {
    RunConfig rc;
    rc.command = "expert-score";
    if (!o.annotations.empty()) rc.add("annotations", o.annotations);
    if (!o.predictions.empty()) rc.add("predictions", o.predictions);
    rc.add("subset", o.subset_manifest);
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.out_dir = o.out;
    return rc;
}

namespace detail {

/// Restricts a predictions file to the subset ids; every subset id must be
/// covered.
inline std::vector<PredictionRecord> restrict_predictions(const std::vector<PredictionRecord>& records,
                                                          const DatasetManifest& subset) {
    std::map<std::string, const PredictionRecord*> by_id;
    for (const auto& r : records) by_id[r.sample_id] = &r;
    std::vector<PredictionRecord> out;
    for (const auto& s : subset.records) {
        auto it = by_id.find(s.sample_id);
        if (it == by_id.end()) fail("cli: predictions are missing subset sample '" + s.sample_id + "'");
        out.push_back(*it->second);
    }
    return out;
}

} // namespace detail

inline void run_expert_score(const ExpertScoreOpts& o) {
    std::vector<std::string> diags;
    if (o.annotations.empty() == o.predictions.empty())
        diags.push_back("exactly one of --annotations or --predictions is required");
    if (o.subset_manifest.empty()) diags.push_back("--subset is required");
    detail::emit_diagnostics(diags);
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, expert_score_run_config(o));
    const auto subset = load_manifest(o.subset_manifest);
    std::vector<std::string> subset_ids;
    for (const auto& r : subset.records) subset_ids.push_back(r.sample_id);

    std::string participant_id;
    std::vector<PredictionRecord> records;
    if (!o.annotations.empty()) {
        const auto ann = load_annotations(o.annotations);
        participant_id = ann.annotator_id;
        records = annotations_to_records(ann, subset, subset_ids, tax);
    } else {
        participant_id = "model";
        records = detail::restrict_predictions(load_predictions(o.predictions), subset);
        for (const auto& r : records) validate_record(r, tax);
    }
    const auto report = score_participant(records, tax);
    save_metrics(dir / ("metrics_" + participant_id + ".json"), report);
    save_confusion_matrix(dir / ("cm_" + participant_id + ".csv"), per_participant_cm(records, tax));
    std::cout << "expert-score: " << participant_id << " top1=" << fmt_double(report.top1)
              << " mcc=" << fmt_double(report.mcc) << "\n";
}

struct AgreeOpts {
    std::vector<std::string> annotations;
    std::string predictions;
    std::string model_id = "model";
    std::string subset_manifest;
    std::string taxonomy;
    std::string out;
};

inline RunConfig agree_run_config(const AgreeOpts& o) {
    RunConfig rc;
    rc.command = "agree";
    rc.add_list("annotations", o.annotations);
    if (!o.predictions.empty()) {
        rc.add("predictions", o.predictions);
        rc.add("model-id", o.model_id);
    }
    rc.add("subset", o.subset_manifest);
    if (!o.taxonomy.empty()) rc.add("taxonomy", o.taxonomy);
    rc.out_dir = o.out;
    return rc;
}

inline void run_agree(const AgreeOpts& o) {
    std::vector<std::string> diags;
    if (o.subset_manifest.empty()) diags.push_back("--subset is required");
    const std::size_t n_participants = o.annotations.size() + (o.predictions.empty() ? 0 : 1);
    if (n_participants < 2) diags.push_back("agreement needs at least 2 participants");
    detail::emit_diagnostics(diags);
    const auto tax = detail::taxonomy_from_option(o.taxonomy);
    const auto dir = detail::prepare_out_dir(o.out, agree_run_config(o));
    const auto subset = load_manifest(o.subset_manifest);
    std::vector<std::string> subset_ids;
    for (const auto& r : subset.records) subset_ids.push_back(r.sample_id);

    std::vector<std::pair<std::string, std::vector<PredictionRecord>>> participants;
    if (!o.predictions.empty()) {
        auto records = detail::restrict_predictions(load_predictions(o.predictions), subset);
        for (const auto& r : records) validate_record(r, tax);
        participants.emplace_back(o.model_id, std::move(records));
    }
    for (const auto& path : o.annotations) {
        const auto ann = load_annotations(path);
        participants.emplace_back(ann.annotator_id, annotations_to_records(ann, subset, subset_ids, tax));
    }
    const auto agreement = agreement_matrix(participants, tax);
    save_agreement_matrix(dir / "agreement.csv", agreement);
    std::cout << "agree: " << participants.size() << " participants\n";
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args) {
    // `--config file` replays a persisted RunConfig.
    bool validate_only = false;
    for (std::size_t i = 0; i < args.size();) {
        if (args[i] == "--validate-only") {
            validate_only = true;
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
        } else {
            ++i;
        }
    }
    if (!args.empty() && args[0] == "--config") {
        if (args.size() < 2) {
            std::cerr << "error: --config needs a file argument\n";
            return 2;
        }
        try {
            args = run_config_argv(load_run_config(args[1]));
        } catch (const Error& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }

    CLI::App app{"habitat: ground-level habitat image classification toolkit"};
    app.require_subcommand(1);

    ToydataOpts toydata;
    auto* c_toydata = app.add_subcommand("toydata", "Generate a procedural toy image dataset");
    c_toydata->add_option("--classes", toydata.classes);
    c_toydata->add_option("--per-class", toydata.per_class);
    c_toydata->add_option("--size", toydata.size);
    c_toydata->add_option("--difficulty", toydata.difficulty);
    c_toydata->add_option("--taxonomy", toydata.taxonomy);
    c_toydata->add_option("--seed", toydata.seed)->required();
    c_toydata->add_option("--out", toydata.out)->required();

    SplitOpts split_o;
    auto* c_split = app.add_subcommand("split", "Stratified train/val/test split of a manifest");
    c_split->add_option("--manifest", split_o.manifest)->required();
    c_split->add_option("--train", split_o.train);
    c_split->add_option("--val", split_o.val);
    c_split->add_option("--test", split_o.test);
    c_split->add_option("--min-test-count", split_o.min_test_count);
    c_split->add_option("--taxonomy", split_o.taxonomy);
    c_split->add_option("--seed", split_o.seed)->required();
    c_split->add_option("--out", split_o.out)->required();

    TrainOpts train_o;
    auto* c_train = app.add_subcommand("train", "Train an encoder+classifier (supervised or supcon)");
    c_train->add_option("--paradigm", train_o.paradigm);
    c_train->add_option("--manifest", train_o.manifest)->required();
    c_train->add_option("--split", train_o.split)->required();
    c_train->add_option("--preset", train_o.preset);
    c_train->add_option("--stage", train_o.stage);
    c_train->add_option("--encoder-checkpoint", train_o.encoder_checkpoint);
    c_train->add_option("--lr", train_o.lr)->check(CLI::NonNegativeNumber);
    c_train->add_option("--weight-decay", train_o.weight_decay)->check(CLI::NonNegativeNumber);
    c_train->add_option("--batch", train_o.batch)->check(CLI::NonNegativeNumber);
    c_train->add_option("--epochs", train_o.epochs)->check(CLI::NonNegativeNumber);
    c_train->add_option("--tau", train_o.tau)->check(CLI::NonNegativeNumber);
    c_train->add_option("--resize", train_o.resize)->check(CLI::PositiveNumber);
    c_train->add_option("--crop", train_o.crop)->check(CLI::PositiveNumber);
    c_train->add_option("--rotate-deg", train_o.rotate_deg)->check(CLI::NonNegativeNumber);
    c_train->add_option("--embed-dim", train_o.embed_dim);
    c_train->add_option("--patch", train_o.patch);
    c_train->add_option("--proj-dim", train_o.proj_dim);
    c_train->add_option("--proj-hidden", train_o.proj_hidden);
    c_train->add_option("--taxonomy", train_o.taxonomy);
    c_train->add_option("--seed", train_o.seed)->required();
    c_train->add_option("--out", train_o.out)->required();

    EvalOpts eval_o;
    auto* c_eval = app.add_subcommand("eval", "Evaluate predictions or a checkpoint");
    c_eval->add_option("--predictions", eval_o.predictions);
    c_eval->add_option("--checkpoint", eval_o.checkpoint);
    c_eval->add_option("--manifest", eval_o.manifest);
    c_eval->add_option("--split", eval_o.split);
    c_eval->add_option("--subset", eval_o.subset);
    c_eval->add_option("--level", eval_o.level);
    c_eval->add_option("--taxonomy", eval_o.taxonomy);
    c_eval->add_option("--out", eval_o.out)->required();

    CmOpts cm_o;
    auto* c_cm = app.add_subcommand("cm", "Confusion matrix exports and heatmap");
    c_cm->add_option("--predictions", cm_o.predictions)->required();
    c_cm->add_option("--level", cm_o.level);
    c_cm->add_option("--taxonomy", cm_o.taxonomy);
    c_cm->add_option("--out", cm_o.out)->required();

    CmDeltaOpts cmd_o;
    auto* c_cmd = app.add_subcommand("cm-delta", "Signed difference of two matrix exports");
    c_cmd->add_option("--a", cmd_o.a)->required();
    c_cmd->add_option("--b", cmd_o.b)->required();
    c_cmd->add_option("--out", cmd_o.out)->required();

    EmbedOpts embed_o;
    auto* c_embed = app.add_subcommand("embed", "Export encoder embeddings for a split subset");
    c_embed->add_option("--checkpoint", embed_o.checkpoint)->required();
    c_embed->add_option("--manifest", embed_o.manifest)->required();
    c_embed->add_option("--split", embed_o.split)->required();
    c_embed->add_option("--subset", embed_o.subset);
    c_embed->add_option("--taxonomy", embed_o.taxonomy);
    c_embed->add_option("--out", embed_o.out)->required();

    ClusterQualityOpts cq_o;
    auto* c_cq = app.add_subcommand("cluster-quality", "Cluster validity indices over an embedding export");
    c_cq->add_option("--embeddings", cq_o.embeddings)->required();
    c_cq->add_option("--taxonomy", cq_o.taxonomy);
    c_cq->add_option("--out", cq_o.out)->required();

    GradcamOpts gc_o;
    auto* c_gc = app.add_subcommand("gradcam", "Class activation maps for images");
    c_gc->add_option("--checkpoint", gc_o.checkpoint)->required();
    c_gc->add_option("--image", gc_o.images);
    c_gc->add_option("--target-class", gc_o.target_class)->required();
    c_gc->add_option("--layer", gc_o.layer);
    c_gc->add_option("--taxonomy", gc_o.taxonomy);
    c_gc->add_option("--out", gc_o.out)->required();

    ExpertSubsetOpts es_o;
    auto* c_es = app.add_subcommand("expert-subset", "Stratified expert-review subset of the test split");
    c_es->add_option("--manifest", es_o.manifest)->required();
    c_es->add_option("--split", es_o.split)->required();
    c_es->add_option("--fraction", es_o.fraction);
    c_es->add_option("--taxonomy", es_o.taxonomy);
    c_es->add_option("--seed", es_o.seed)->required();
    c_es->add_option("--out", es_o.out)->required();

    ExpertScoreOpts esc_o;
    auto* c_esc = app.add_subcommand("expert-score", "Score an annotator or model on the review subset");
    c_esc->add_option("--annotations", esc_o.annotations);
    c_esc->add_option("--predictions", esc_o.predictions);
    c_esc->add_option("--subset", esc_o.subset_manifest)->required();
    c_esc->add_option("--taxonomy", esc_o.taxonomy);
    c_esc->add_option("--out", esc_o.out)->required();

    AgreeOpts agree_o;
    auto* c_agree = app.add_subcommand("agree", "Pairwise agreement matrix over participants");
    c_agree->add_option("--annotations", agree_o.annotations);
    c_agree->add_option("--predictions", agree_o.predictions);
    c_agree->add_option("--model-id", agree_o.model_id);
    c_agree->add_option("--subset", agree_o.subset_manifest)->required();
    c_agree->add_option("--taxonomy", agree_o.taxonomy);
    c_agree->add_option("--out", agree_o.out)->required();

    std::vector<const char*> argv;
    argv.push_back("habitat");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (c_toydata->parsed()) {
            if (validate_only) {
                detail::emit_diagnostics(validate_toydata(toydata));
            } else {
                run_toydata(toydata);
            }
        } else if (c_split->parsed()) {
            if (validate_only)
                detail::emit_diagnostics(validate_split_opts(split_o));
            else
                run_split(split_o);
        } else if (c_train->parsed()) {
            if (validate_only)
                detail::emit_diagnostics(validate_train_opts(train_o));
            else
                run_train(train_o);
        } else if (c_eval->parsed()) {
            if (validate_only)
                detail::emit_diagnostics(validate_eval_opts(eval_o));
            else
                run_eval(eval_o);
        } else if (c_cm->parsed()) {
            run_cm(cm_o);
        } else if (c_cmd->parsed()) {
            run_cm_delta(cmd_o);
        } else if (c_embed->parsed()) {
            run_embed(embed_o);
        } else if (c_cq->parsed()) {
            run_cluster_quality(cq_o);
        } else if (c_gc->parsed()) {
            run_gradcam(gc_o);
        } else if (c_es->parsed()) {
            run_expert_subset(es_o);
        } else if (c_esc->parsed()) {
            run_expert_score(esc_o);
        } else if (c_agree->parsed()) {
            run_agree(agree_o);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

/// Cross-field validation of a persisted run config without executing it.
/// Returns every diagnostic at once; an empty result means the config is ok.
inline std::vector<std::string> validate_config(const RunConfig& rc) {
    std::vector<std::string> diags;
    detail::diag_sink = &diags;
    auto argv = run_config_argv(rc);
    argv.insert(argv.begin(), "--validate-only");
    std::ostringstream out_sink, err_sink;
    auto* old_out = std::cout.rdbuf(out_sink.rdbuf());
    auto* old_err = std::cerr.rdbuf(err_sink.rdbuf());
    const int rc_code = run(argv);
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    detail::diag_sink = nullptr;
    if (rc_code != 0 && diags.empty()) diags.push_back(trim(err_sink.str()));
    return diags;
}

} // namespace habitat::cli
