#include "ibca/config.hpp"

#include "ibca/errors.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <array>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <vector>

namespace ibca {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model." + msg); };
    if (image_size <= 0) fail("image_size must be positive");
    if (patch_size <= 0) fail("patch_size must be positive");
    if (image_size % patch_size != 0) {
        fail("image_size (" + std::to_string(image_size) + ") is not divisible by patch_size (" +
             std::to_string(patch_size) + ")");
    }
    if (channels <= 0) fail("channels must be positive");
    if (n_classes <= 0) fail("n_classes must be positive");
    if (embed_dim <= 0) fail("embed_dim must be positive");
    if (n_heads <= 0) fail("n_heads must be positive");
    if (embed_dim % n_heads != 0) {
        fail("embed_dim (" + std::to_string(embed_dim) + ") is not divisible by n_heads (" +
             std::to_string(n_heads) + ")");
    }
    if (n_blocks <= 0) fail("n_blocks must be positive");
    if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
}

namespace {
constexpr std::array<std::pair<Variant, std::string_view>, 4> kVariantNames{{
    {Variant::basic, "basic"},
    {Variant::single_vib, "single_vib"},
    {Variant::gmm_vib, "gmm_vib"},
    {Variant::full, "full"},
}};
}  // namespace

std::string_view to_string(Variant v) {
    for (const auto& [var, name] : kVariantNames) {
        if (var == v) return name;
    }
    return "unknown";
}

Variant parse_variant(std::string_view name) {
    for (const auto& [var, n] : kVariantNames) {
        if (n == name) return var;
    }
    throw ConfigError("train.variant: unknown variant '" + std::string(name) +
                      "'; expected one of {basic, single_vib, gmm_vib, full}");
}

std::string_view display_name(Variant v) {
    switch (v) {
        case Variant::basic: return "Basic";
        case Variant::single_vib: return "Single VIB";
        case Variant::gmm_vib: return "GMM VIB";
        case Variant::full: return "Ours";
    }
    return "unknown";
}

void TrainConfig::validate() const {
    if (!(beta >= 0.0)) throw ConfigError("train.beta must be >= 0");
    if (!(lambda_s >= 0.0)) throw ConfigError("train.lambda_s must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (!(alpha0 > 0.0)) throw ConfigError("train.alpha0 must be > 0");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("train.threshold must lie in (0, 1)");
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (preset != "desk" && preset != "paper") throw ConfigError("run.preset must be 'desk' or 'paper'");
    for (int c = 0; c < 3; ++c) {
        if (!(norm.stddev[c] > 0.0)) throw ConfigError("norm.std must be positive");
    }
}

RunConfig paper_preset() {
    RunConfig c;
    c.preset = "paper";
    c.model.image_size = 224;
    c.model.patch_size = 16;
    c.model.embed_dim = 768;
    c.model.n_heads = 12;
    c.model.n_blocks = 12;
    c.model.mlp_ratio = 4;
    c.train.batch_size = 64;
    c.train.epochs = 200;
    c.train.learning_rate = 1e-4;
    return c;
}

RunConfig desk_preset() {
    RunConfig c;
    c.preset = "desk";
    c.model.image_size = 32;
    c.model.patch_size = 8;
    c.model.embed_dim = 64;
    c.model.n_heads = 4;
    c.model.n_blocks = 4;
    c.model.mlp_ratio = 2;
    c.train.batch_size = 32;
    c.train.epochs = 30;
    c.train.learning_rate = 1e-3;
    return c;
}

RunConfig preset(std::string_view name) {
    if (name == "desk") return desk_preset();
    if (name == "paper") return paper_preset();
    throw ConfigError("run.preset: unknown preset '" + std::string(name) + "'; expected desk or paper");
}

namespace {

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
    T value{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) {
        throw ConfigError(std::string(key) + ": cannot parse '" + std::string(text) + "'");
    }
    return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError(std::string(key) + ": expected a boolean, got '" + std::string(text) + "'");
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

struct Field {
    std::string_view section;
    std::string_view key;
    std::function<void(RunConfig&, std::string_view, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define IBCA_INT_FIELD(sec, name, member)                                                          \
    Field {                                                                                        \
        sec, name, [](RunConfig& c, std::string_view k, std::string_view v) {                      \
            c.member = parse_number<decltype(c.member)>(k, v);                                     \
        },                                                                                         \
            [](const RunConfig& c) { return std::to_string(c.member); }                            \
    }
#define IBCA_REAL_FIELD(sec, name, member)                                                         \
    Field {                                                                                        \
        sec, name, [](RunConfig& c, std::string_view k, std::string_view v) {                      \
            c.member = parse_number<double>(k, v);                                                 \
        },                                                                                         \
            [](const RunConfig& c) { return fmt_double(c.member); }                                \
    }
#define IBCA_STRING_FIELD(sec, name, member)                                                       \
    Field {                                                                                        \
        sec, name, [](RunConfig& c, std::string_view, std::string_view v) { c.member = std::string(v); }, \
            [](const RunConfig& c) { return c.member; }                                            \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        IBCA_STRING_FIELD("run", "output_dir", output_dir),
        IBCA_INT_FIELD("model", "image_size", model.image_size),
        IBCA_INT_FIELD("model", "patch_size", model.patch_size),
        IBCA_INT_FIELD("model", "channels", model.channels),
        IBCA_INT_FIELD("model", "n_classes", model.n_classes),
        IBCA_INT_FIELD("model", "embed_dim", model.embed_dim),
        IBCA_INT_FIELD("model", "n_heads", model.n_heads),
        IBCA_INT_FIELD("model", "n_blocks", model.n_blocks),
        IBCA_INT_FIELD("model", "mlp_ratio", model.mlp_ratio),
        IBCA_INT_FIELD("model", "model_seed", model.seed),
        Field{"train", "variant",
              [](RunConfig& c, std::string_view, std::string_view v) { c.train.variant = parse_variant(v); },
              [](const RunConfig& c) { return std::string(to_string(c.train.variant)); }},
        IBCA_REAL_FIELD("train", "beta", train.beta),
        IBCA_REAL_FIELD("train", "lambda_s", train.lambda_s),
        IBCA_REAL_FIELD("train", "learning_rate", train.learning_rate),
        IBCA_INT_FIELD("train", "batch_size", train.batch_size),
        IBCA_INT_FIELD("train", "epochs", train.epochs),
        IBCA_REAL_FIELD("train", "alpha0", train.alpha0),
        IBCA_INT_FIELD("train", "seed", train.seed),
        IBCA_REAL_FIELD("train", "threshold", train.threshold),
        Field{"train", "kl_form",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  if (v == "unit_log") c.train.kl_form = KlForm::unit_log;
                  else if (v == "textbook") c.train.kl_form = KlForm::textbook;
                  else throw ConfigError(std::string(k) + ": expected unit_log or textbook");
              },
              [](const RunConfig& c) {
                  return std::string(c.train.kl_form == KlForm::unit_log ? "unit_log" : "textbook");
              }},
        Field{"train", "cosine_decay",
              [](RunConfig& c, std::string_view k, std::string_view v) { c.train.cosine_decay = parse_bool(k, v); },
              [](const RunConfig& c) { return std::string(c.train.cosine_decay ? "true" : "false"); }},
        IBCA_REAL_FIELD("norm", "mean_r", norm.mean[0]),
        IBCA_REAL_FIELD("norm", "mean_g", norm.mean[1]),
        IBCA_REAL_FIELD("norm", "mean_b", norm.mean[2]),
        IBCA_REAL_FIELD("norm", "std_r", norm.stddev[0]),
        IBCA_REAL_FIELD("norm", "std_g", norm.stddev[1]),
        IBCA_REAL_FIELD("norm", "std_b", norm.stddev[2]),
        IBCA_STRING_FIELD("data", "train_manifest", data.train_manifest),
        IBCA_STRING_FIELD("data", "val_manifest", data.val_manifest),
        IBCA_STRING_FIELD("data", "test_manifest", data.test_manifest),
        IBCA_STRING_FIELD("data", "image_root", data.image_root),
    };
    return table;
}

#undef IBCA_INT_FIELD
#undef IBCA_REAL_FIELD
#undef IBCA_STRING_FIELD

}  // namespace

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
    std::string_view section;
    std::string_view name = key;
    if (auto dot = key.find('.'); dot != std::string_view::npos) {
        section = key.substr(0, dot);
        name = key.substr(dot + 1);
    }
    if (name == "preset" && (section.empty() || section == "run")) {
        RunConfig base = preset(value);
        base.data = cfg.data;
        base.output_dir = cfg.output_dir;
        cfg = base;
        return;
    }
    const Field* match = nullptr;
    for (const Field& f : fields()) {
        if (f.key != name || (!section.empty() && f.section != section)) continue;
        if (match != nullptr) throw ConfigError(std::string(key) + ": ambiguous key; qualify with a section");
        match = &f;
    }
    if (match == nullptr) throw ConfigError(std::string(key) + ": unknown configuration key");
    const std::string qualified = std::string(match->section) + "." + std::string(match->key);
    match->set(cfg, qualified, value);
}

RunConfig parse_run_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    RunConfig cfg = desk_preset();
    if (auto run = tree.get_child_optional("run")) {
        if (auto p = run->get_optional<std::string>("preset")) cfg = preset(*p);
    }
    for (const auto& [section, children] : tree) {
        if (children.empty() && !children.data().empty()) {
            throw ConfigError("config: key '" + section + "' must appear inside a section");
        }
        for (const auto& [key, node] : children) {
            if (section == "run" && key == "preset") continue;
            apply_setting(cfg, section + "." + key, node.data());
        }
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::map<std::string, std::string> to_key_values(const RunConfig& cfg) {
    std::map<std::string, std::string> out;
    out["run.preset"] = cfg.preset;
    for (const Field& f : fields()) {
        out[std::string(f.section) + "." + std::string(f.key)] = f.get(cfg);
    }
    return out;
}

std::string to_ini(const RunConfig& cfg) {
    std::ostringstream os;
    os << "[run]\npreset = " << cfg.preset << "\n";
    std::string_view current = "run";
    for (const Field& f : fields()) {
        if (f.section != current) {
            os << "\n[" << f.section << "]\n";
            current = f.section;
        }
        os << f.key << " = " << f.get(cfg) << "\n";
    }
    return os.str();
}

}  // namespace ibca
