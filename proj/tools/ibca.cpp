// ibca: train, evaluate and inspect IBCA models.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error.

#include "ibca/config.hpp"
#include "ibca/data.hpp"
#include "ibca/errors.hpp"
#include "ibca/metrics.hpp"
#include "ibca/objective.hpp"
#include "ibca/serialization.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ibca;

namespace {

struct ConfigOptions {
    std::string config_path;
    std::string preset_name;
    std::vector<std::string> settings;
    std::string output_root;
    std::string run_name = "run";
};

struct SyntheticOptions {
    bool enabled = false;
    double rho_train = 0.9;
    double rho_test = 0.0;
    int n_samples = 2000;
};

void add_config_options(CLI::App* cmd, ConfigOptions& o) {
    cmd->add_option("--config", o.config_path, "INI run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--preset", o.preset_name, "base preset when no --config is given (desk, paper)");
    cmd->add_option("--set", o.settings, "key=value override, repeatable")->take_all();
    cmd->add_option("--output", o.output_root, "output root; defaults to $IBCA_OUTPUT_ROOT, then run.output_dir");
    cmd->add_option("--name", o.run_name, "run directory name under the output root");
}

void add_synthetic_options(CLI::App* cmd, SyntheticOptions& o) {
    cmd->add_flag("--synthetic", o.enabled, "train on generated confounded data instead of manifests");
    cmd->add_option("--rho-train", o.rho_train, "synthetic background/label-0 correlation in train and val");
    cmd->add_option("--rho-test", o.rho_test, "synthetic background/label-0 correlation in test");
    cmd->add_option("--n-samples", o.n_samples, "synthetic dataset size");
}

RunConfig resolve_config(const ConfigOptions& o) {
    RunConfig cfg = o.config_path.empty() ? preset(o.preset_name.empty() ? "desk" : o.preset_name)
                                          : load_run_config(o.config_path);
    if (!o.config_path.empty() && !o.preset_name.empty()) {
        throw ConfigError("--preset: give either --config or --preset, not both");
    }
    for (const std::string& s : o.settings) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set: expected key=value, got '" + s + "'");
        apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (!o.output_root.empty()) {
        cfg.output_dir = o.output_root;
    } else if (const char* env = std::getenv("IBCA_OUTPUT_ROOT"); env && *env) {
        cfg.output_dir = env;
    }
    cfg.validate();
    return cfg;
}

fs::path make_run_dir(const RunConfig& cfg, const std::string& name) {
    fs::path dir = fs::path(cfg.output_dir) / name;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create run directory '" + dir.string() + "': " + ec.message());
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

struct LoadedData {
    std::vector<std::string> class_names;
    Dataset train, val, test;
    bool has_val = false;
    bool has_test = false;
};

void check_classes(const RunConfig& cfg, std::size_t n_classes, const std::string& source) {
    if (static_cast<int>(n_classes) != cfg.model.n_classes) {
        throw ConfigError("model.n_classes is " + std::to_string(cfg.model.n_classes) + " but " + source + " has " +
                          std::to_string(n_classes) + " classes");
    }
}

LoadedData load_training_data(const RunConfig& cfg, const SyntheticOptions& synth) {
    LoadedData d;
    if (synth.enabled) {
        SyntheticSpec spec;
        spec.n_classes = cfg.model.n_classes;
        spec.seed = cfg.train.seed;
        spec.rho_train = synth.rho_train;
        spec.rho_test = synth.rho_test;
        spec.n_samples = synth.n_samples;
        SyntheticDataset s = generate_synthetic(spec);
        d.class_names = s.class_names;
        d.train = synthetic_split(s, SplitName::train, cfg.model.image_size, cfg.norm);
        d.val = synthetic_split(s, SplitName::val, cfg.model.image_size, cfg.norm);
        d.test = synthetic_split(s, SplitName::test, cfg.model.image_size, cfg.norm);
        d.has_val = d.has_test = true;
        return d;
    }
    if (cfg.data.train_manifest.empty()) {
        throw ConfigError("data.train_manifest: required unless --synthetic is given");
    }
    auto load = [&](const std::string& path) {
        Manifest m = load_manifest(path);
        check_classes(cfg, m.n_classes(), "'" + path + "'");
        if (d.class_names.empty()) d.class_names = m.class_names;
        return load_dataset(m, cfg.model.image_size, cfg.norm, cfg.data.image_root);
    };
    d.train = load(cfg.data.train_manifest);
    if (!cfg.data.val_manifest.empty()) {
        d.val = load(cfg.data.val_manifest);
        d.has_val = true;
    }
    if (!cfg.data.test_manifest.empty()) {
        d.test = load(cfg.data.test_manifest);
        d.has_test = true;
    }
    return d;
}

std::string epoch_csv_header() { return "epoch,total_loss,vib_mlsm,kl,l_t,l_s,val_CR,val_CF1,val_OR,val_OF1,val_mAP\n"; }

std::string epoch_csv_row(const EpochReport& e) {
    std::ostringstream os;
    os << std::setprecision(17) << e.epoch << ',' << e.total_loss << ',' << e.vib_mlsm << ',' << e.kl << ','
       << e.l_t << ',' << e.l_s;
    if (e.val) {
        os << ',' << e.val->cr << ',' << e.val->cf1 << ',' << e.val->or_ << ',' << e.val->of1 << ',' << e.val->map;
    } else {
        os << ",,,,,";
    }
    os << '\n';
    return os.str();
}

struct TrainedRun {
    Model best;
    TrainResult result;
};

TrainedRun train_run(const RunConfig& cfg, const LoadedData& data, const fs::path& dir) {
    write_text(dir / "config.ini", to_ini(cfg));
    std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw IoError("cannot write '" + (dir / "metrics.csv").string() + "'");
    metrics << epoch_csv_header();

    Model model = init_model(cfg.model, cfg.train.variant, cfg.train.seed);
    TrainResult result = train(model, data.train, data.has_val ? &data.val : nullptr, cfg.train,
                               [&](const EpochReport& e) {
                                   metrics << epoch_csv_row(e) << std::flush;
                                   std::cerr << "epoch " << e.epoch << " loss " << e.total_loss;
                                   if (e.val) std::cerr << " val mAP " << e.val->map;
                                   std::cerr << " (" << std::fixed << std::setprecision(1) << e.seconds << " s)"
                                             << std::defaultfloat << std::setprecision(6) << '\n';
                               });
    Model best{cfg.model, cfg.train.variant, result.best};
    save_checkpoint(dir / "best.ckpt", cfg, best);
    save_checkpoint(dir / "last.ckpt", cfg, Model{cfg.model, cfg.train.variant, result.last});
    return {std::move(best), std::move(result)};
}

MetricsReport evaluate_split(const Model& model, const Dataset& data, double threshold) {
    return evaluate(predict(model, data.images), data.labels, threshold);
}

void write_report(const fs::path& dir, const std::string& stem, const MetricsReport& report,
                  const std::vector<std::string>& class_names) {
    write_text(dir / (stem + ".csv"), report_csv(report));
    write_text(dir / (stem + "_per_class.csv"), per_class_csv(report, class_names));
}

// ---------------------------------------------------------------------------

int cmd_train(const ConfigOptions& co, const SyntheticOptions& so) {
    RunConfig cfg = resolve_config(co);
    LoadedData data = load_training_data(cfg, so);
    fs::path dir = make_run_dir(cfg, co.run_name);
    TrainedRun run = train_run(cfg, data, dir);
    std::cout << "best epoch " << run.result.best_epoch << ", checkpoint " << (dir / "best.ckpt").string() << '\n';
    if (data.has_test) {
        MetricsReport r = evaluate_split(run.best, data.test, cfg.train.threshold);
        write_report(dir, "test", r, data.class_names);
        std::cout << format_report(r, data.class_names);
    }
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path, const std::string& split_name,
             const std::string& out_dir, const std::string& image_root) {
    Checkpoint ck = load_checkpoint(checkpoint);
    Manifest m = load_manifest(manifest_path);
    if (static_cast<int>(m.n_classes()) != ck.model.config.n_classes) {
        throw ConfigError("checkpoint has " + std::to_string(ck.model.config.n_classes) + " classes but manifest '" +
                          manifest_path + "' has " + std::to_string(m.n_classes()));
    }
    Dataset data = load_dataset(m, ck.model.config.image_size, ck.config.norm,
                                image_root.empty() ? ck.config.data.image_root : image_root);
    MetricsReport r = evaluate_split(ck.model, data, ck.config.train.threshold);
    std::cout << format_report(r, m.class_names);
    fs::path dir = out_dir.empty() ? fs::path(checkpoint).parent_path() : fs::path(out_dir);
    if (dir.empty()) dir = ".";
    fs::create_directories(dir);
    write_report(dir, "eval_" + split_name, r, m.class_names);
    return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& manifest_path, const std::vector<std::string>& images,
                const std::string& out_path) {
    Checkpoint ck = load_checkpoint(checkpoint);
    std::vector<std::string> paths;
    std::vector<ImageTensor> tensors;
    if (!manifest_path.empty()) {
        Manifest m = load_manifest(manifest_path);
        for (const auto& row : m.rows) {
            fs::path p = fs::path(row.path).is_absolute() ? fs::path(row.path) : m.base_dir / row.path;
            paths.push_back(row.path);
            tensors.push_back(preprocess_file(p, ck.model.config.image_size, ck.config.norm));
        }
    }
    for (const std::string& p : images) {
        paths.push_back(p);
        tensors.push_back(preprocess_file(p, ck.model.config.image_size, ck.config.norm));
    }
    if (tensors.empty()) throw ConfigError("predict: give --manifest or at least one image");
    Matrix probs = predict(ck.model, tensors);
    std::ostringstream os;
    os << "path";
    for (int k = 0; k < ck.model.config.n_classes; ++k) os << ",p" << k;
    os << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < paths.size(); ++i) {
        os << paths[i];
        for (Eigen::Index k = 0; k < probs.cols(); ++k) os << ',' << probs(static_cast<Eigen::Index>(i), k);
        os << '\n';
    }
    if (out_path.empty()) {
        std::cout << os.str();
    } else {
        write_text(out_path, os.str());
    }
    return 0;
}

int cmd_ablate(const ConfigOptions& co, const SyntheticOptions& so, const std::vector<std::uint64_t>& seeds) {
    RunConfig base = resolve_config(co);
    fs::path dir = make_run_dir(base, co.run_name);
    const std::vector<Variant> variants{Variant::basic, Variant::single_vib, Variant::gmm_vib, Variant::full};
    std::ostringstream csv;
    csv << "seed,variant,CR,CF1,OR,OF1,mAP\n" << std::fixed << std::setprecision(4);
    int full_ge_basic = 0;
    for (std::uint64_t seed : seeds) {
        RunConfig cfg = base;
        cfg.train.seed = seed;
        LoadedData data = load_training_data(cfg, so);
        if (!data.has_test) throw ConfigError("data.test_manifest: ablation needs a test split");
        std::cout << "seed " << seed << "\n"
                  << std::left << std::setw(12) << "variant" << std::right << std::setw(9) << "CR" << std::setw(9)
                  << "CF1" << std::setw(9) << "OR" << std::setw(9) << "OF1" << std::setw(9) << "mAP" << '\n';
        std::map<Variant, double> map;
        for (Variant v : variants) {
            cfg.train.variant = v;
            fs::path run_dir = dir / ("seed" + std::to_string(seed) + "_" + std::string(to_string(v)));
            fs::create_directories(run_dir);
            TrainedRun run = train_run(cfg, data, run_dir);
            MetricsReport r = evaluate_split(run.best, data.test, cfg.train.threshold);
            write_report(run_dir, "test", r, data.class_names);
            map[v] = r.map;
            csv << seed << ',' << display_name(v) << ',' << r.cr << ',' << r.cf1 << ',' << r.or_ << ',' << r.of1
                << ',' << r.map << '\n';
            std::cout << std::left << std::setw(12) << display_name(v) << std::right << std::fixed
                      << std::setprecision(2) << std::setw(9) << r.cr << std::setw(9) << r.cf1 << std::setw(9)
                      << r.or_ << std::setw(9) << r.of1 << std::setw(9) << r.map << std::defaultfloat << '\n';
        }
        full_ge_basic += map[Variant::full] >= map[Variant::basic];
    }
    write_text(dir / "ablation.csv", csv.str());
    std::cout << "full mAP >= basic mAP in " << full_ge_basic << "/" << seeds.size() << " seeds\n";
    return 0;
}

/// Min-max scaled to [0, 255], nearest-neighbour upsampled to size x size.
Image heatmap(const Eigen::Ref<const Eigen::RowVectorXd>& map, int grid, int size) {
    const double lo = map.minCoeff(), hi = map.maxCoeff();
    const double range = hi - lo;
    Image img{size, size, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size)};
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const int cell = (y * grid / size) * grid + (x * grid / size);
            const double v = range > 0.0 ? (map(cell) - lo) / range : 0.0;
            img.pixels[static_cast<std::size_t>(y) * size + x] = static_cast<std::uint8_t>(std::lround(255.0 * v));
        }
    }
    return img;
}

RawTensor raw(const Matrix& m, std::vector<std::size_t> shape) {
    RawTensor t{std::move(shape), std::vector<double>(m.data(), m.data() + m.size())};
    return t;
}

int cmd_export_attention(const std::string& checkpoint, const std::vector<std::string>& images,
                         const std::string& out_dir) {
    Checkpoint ck = load_checkpoint(checkpoint);
    const ModelConfig& mc = ck.model.config;
    std::vector<ImageTensor> tensors;
    for (const std::string& p : images) tensors.push_back(preprocess_file(p, mc.image_size, ck.config.norm));
    Inference inf = infer(ck.model, tensors, true);
    fs::create_directories(out_dir);
    const std::size_t n = tensors.size(), nc = static_cast<std::size_t>(mc.n_classes),
                      heads = static_cast<std::size_t>(mc.n_heads), grid = static_cast<std::size_t>(mc.grid());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < nc; ++k) {
            const auto row = static_cast<Eigen::Index>(i * nc + k);
            std::ostringstream name;
            name << "image" << i << "_class" << k;
            write_pnm(fs::path(out_dir) / (name.str() + ".pgm"),
                      heatmap(inf.spatial.row(row), mc.grid(), mc.image_size));
            for (std::size_t h = 0; h < heads; ++h) {
                const auto hr = static_cast<Eigen::Index>((i * heads + h) * nc + k);
                write_pnm(fs::path(out_dir) / (name.str() + "_head" + std::to_string(h) + ".pgm"),
                          heatmap(inf.head_attention.row(hr), mc.grid(), mc.image_size));
            }
        }
    }
    write_raw_tensor(fs::path(out_dir) / "spatial_attention.tensor", raw(inf.spatial, {n, nc, grid, grid}));
    write_raw_tensor(fs::path(out_dir) / "head_attention.tensor",
                     raw(inf.head_attention, {n, heads, nc, grid, grid}));
    write_raw_tensor(fs::path(out_dir) / "intervention_scores.tensor", raw(inf.intervention, {n, nc}));
    std::ostringstream index;
    index << "index,path\n";
    for (std::size_t i = 0; i < n; ++i) index << i << ',' << images[i] << '\n';
    write_text(fs::path(out_dir) / "images.csv", index.str());
    std::cout << "wrote " << n * nc * (1 + heads) << " heatmaps to " << out_dir << '\n';
    return 0;
}

int cmd_dump_features(const std::string& checkpoint, const std::string& manifest_path, const std::string& out_path) {
    Checkpoint ck = load_checkpoint(checkpoint);
    Manifest m = load_manifest(manifest_path);
    if (static_cast<int>(m.n_classes()) != ck.model.config.n_classes) {
        throw ConfigError("checkpoint has " + std::to_string(ck.model.config.n_classes) + " classes but manifest '" +
                          manifest_path + "' has " + std::to_string(m.n_classes()));
    }
    Dataset data = load_dataset(m, ck.model.config.image_size, ck.config.norm, ck.config.data.image_root);
    Inference inf = infer(ck.model, data.images);
    const Eigen::Index nc = ck.model.config.n_classes;
    std::ostringstream os;
    os << "sample";
    for (Eigen::Index d = 0; d < inf.features.cols(); ++d) os << ",f" << d;
    os << ",class\n" << std::setprecision(17);
    for (Eigen::Index i = 0; i < data.labels.rows(); ++i) {
        for (Eigen::Index k = 0; k < nc; ++k) {
            if (data.labels(i, k) != 1.0) continue;
            os << i;
            for (Eigen::Index d = 0; d < inf.features.cols(); ++d) os << ',' << inf.features(i * nc + k, d);
            os << ',' << m.class_names[static_cast<std::size_t>(k)] << '\n';
        }
    }
    if (out_path.empty()) {
        std::cout << os.str();
    } else {
        write_text(out_path, os.str());
    }
    return 0;
}

int cmd_synth(SyntheticSpec spec, const std::string& out_dir) {
    spec.validate();
    SyntheticDataset data = generate_synthetic(spec);
    write_synthetic(data, out_dir);
    std::cout << "wrote " << data.images.size() << " images to " << out_dir << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"IBCA multi-label image recognition"};
    app.require_subcommand(1);

    ConfigOptions co;
    SyntheticOptions so;

    CLI::App* train_cmd = app.add_subcommand("train", "train one model and write a run directory");
    add_config_options(train_cmd, co);
    add_synthetic_options(train_cmd, so);

    std::string checkpoint, manifest, split_name = "test", out, image_root;
    std::vector<std::string> images;
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
    eval_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--split", split_name, "label used in output file names");
    eval_cmd->add_option("--out", out, "report directory; defaults to the checkpoint's directory");
    eval_cmd->add_option("--image-root", image_root, "directory relative image paths resolve against");

    CLI::App* predict_cmd = app.add_subcommand("predict", "fused class probabilities as CSV");
    predict_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    predict_cmd->add_option("--manifest", manifest)->check(CLI::ExistingFile);
    predict_cmd->add_option("--out", out, "CSV path; stdout when omitted");
    predict_cmd->add_option("images", images)->check(CLI::ExistingFile);

    std::vector<std::uint64_t> seeds{0};
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "train the four variants and compare them");
    add_config_options(ablate_cmd, co);
    add_synthetic_options(ablate_cmd, so);
    ablate_cmd->add_option("--seeds", seeds, "seeds shared by every variant")->delimiter(',');

    CLI::App* export_cmd = app.add_subcommand("export-attention", "heatmaps and raw attention tensors");
    export_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    export_cmd->add_option("--out", out)->required();
    export_cmd->add_option("images", images)->required()->check(CLI::ExistingFile);

    CLI::App* dump_cmd = app.add_subcommand("dump-features", "patch-token class features as CSV");
    dump_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    dump_cmd->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    dump_cmd->add_option("--out", out, "CSV path; stdout when omitted");

    SyntheticSpec spec;
    CLI::App* synth_cmd = app.add_subcommand("synth", "write a synthetic confounded dataset");
    synth_cmd->add_option("--out", out)->required();
    synth_cmd->add_option("--n-samples", spec.n_samples);
    synth_cmd->add_option("--n-classes", spec.n_classes);
    synth_cmd->add_option("--image-size", spec.image_size);
    synth_cmd->add_option("--rho-train", spec.rho_train);
    synth_cmd->add_option("--rho-test", spec.rho_test);
    synth_cmd->add_option("--label-rate", spec.label_rate);
    synth_cmd->add_option("--cooccurrence", spec.cooccurrence);
    synth_cmd->add_option("--noise", spec.noise);
    synth_cmd->add_option("--seed", spec.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*train_cmd) return cmd_train(co, so);
        if (*eval_cmd) return cmd_eval(checkpoint, manifest, split_name, out, image_root);
        if (*predict_cmd) return cmd_predict(checkpoint, manifest, images, out);
        if (*ablate_cmd) return cmd_ablate(co, so, seeds);
        if (*export_cmd) return cmd_export_attention(checkpoint, images, out);
        if (*dump_cmd) return cmd_dump_features(checkpoint, manifest, out);
        if (*synth_cmd) return cmd_synth(spec, out);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
