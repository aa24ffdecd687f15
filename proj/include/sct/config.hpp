#pragma once

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sct/common.hpp"
#include "sct/expression.hpp"
#include "sct/masking.hpp"
#include "sct/model.hpp"
#include "sct/rng.hpp"
#include "sct/training.hpp"

namespace sct {

// INI-style run configuration: `[section]` headers, `key = value` lines,
// `#`/`;` comments. Every lookup first consults the environment variable
// SCT_<SECTION>_<KEY> (uppercased, punctuation mapped to `_`) so CI can
// override single keys without editing files.
class ConfigFile {
public:
    static ConfigFile parse(const std::string& text, const std::string& origin = "<string>") {
        ConfigFile c;
        c.origin_ = origin;
        std::istringstream in(text);
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';') {
                continue;
            }
            if (t.front() == '[') {
                if (t.back() != ']' || t.size() < 3) {
                    throw ParseError(origin + ":" + std::to_string(lineno) +
                                     ": malformed section header '" + t + "'");
                }
                section = trim(t.substr(1, t.size() - 2));
                if (c.sections_.emplace(section, Section{}).second) {
                    c.section_order_.push_back(section);
                }
                continue;
            }
            const std::size_t eq = t.find('=');
            if (eq == std::string::npos) {
                throw ParseError(origin + ":" + std::to_string(lineno) +
                                 ": expected 'key = value', got '" + t + "'");
            }
            const std::string key = trim(t.substr(0, eq));
            if (key.empty()) {
                throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            if (c.sections_.emplace(section, Section{}).second) {
                c.section_order_.push_back(section);
            }
            c.sections_[section][key] = trim(t.substr(eq + 1));
        }
        return c;
    }

    static ConfigFile load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) {
            throw IoError("cannot open " + path.string());
        }
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse(buf.str(), path.string());
    }

    static std::string env_name(const std::string& section, const std::string& key) {
        std::string out = "SCT";
        for (const std::string* part : {&section, &key}) {
            out += '_';
            for (char ch : *part) {
                out += std::isalnum(static_cast<unsigned char>(ch))
                           ? static_cast<char>(std::toupper(static_cast<unsigned char>(ch)))
                           : '_';
            }
        }
        return out;
    }

    bool has(const std::string& section, const std::string& key) const {
        if (std::getenv(env_name(section, key).c_str())) {
            return true;
        }
        auto s = sections_.find(section);
        return s != sections_.end() && s->second.count(key) > 0;
    }

    std::string get(const std::string& section, const std::string& key) const {
        if (const char* env = std::getenv(env_name(section, key).c_str())) {
            return env;
        }
        auto s = sections_.find(section);
        if (s != sections_.end()) {
            auto k = s->second.find(key);
            if (k != s->second.end()) {
                return k->second;
            }
        }
        throw ConfigError(origin_ + ": missing config key [" + section + "] " + key);
    }

    std::string get_or(const std::string& section, const std::string& key,
                       const std::string& fallback) const {
        return has(section, key) ? get(section, key) : fallback;
    }

    long get_long(const std::string& section, const std::string& key) const {
        return to_long(section, key, get(section, key));
    }
    long get_long_or(const std::string& section, const std::string& key, long fallback) const {
        return has(section, key) ? get_long(section, key) : fallback;
    }

    double get_double(const std::string& section, const std::string& key) const {
        return to_double(section, key, get(section, key));
    }
    double get_double_or(const std::string& section, const std::string& key,
                         double fallback) const {
        return has(section, key) ? get_double(section, key) : fallback;
    }

    bool get_bool(const std::string& section, const std::string& key) const {
        const std::string v = get(section, key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") {
            return true;
        }
        if (v == "false" || v == "0" || v == "no" || v == "off") {
            return false;
        }
        throw ConfigError(bad_value(section, key, v) + " (expected a boolean)");
    }
    bool get_bool_or(const std::string& section, const std::string& key, bool fallback) const {
        return has(section, key) ? get_bool(section, key) : fallback;
    }

    // Comma-separated doubles, e.g. replace_probs = 0.8, 0.1, 0.1
    std::vector<double> get_double_list(const std::string& section, const std::string& key) const {
        const std::string v = get(section, key);
        std::vector<double> out;
        std::size_t start = 0;
        while (start <= v.size()) {
            std::size_t comma = v.find(',', start);
            if (comma == std::string::npos) {
                comma = v.size();
            }
            out.push_back(to_double(section, key, trim(v.substr(start, comma - start))));
            start = comma + 1;
        }
        return out;
    }

    using Section = std::map<std::string, std::string>;

    const std::map<std::string, Section>& sections() const {
        return sections_;
    }

    // Section names in first-appearance order.
    const std::vector<std::string>& section_names() const {
        return section_order_;
    }

    const std::string& origin() const {
        return origin_;
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) {
            ++a;
        }
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) {
            --b;
        }
        return s.substr(a, b - a);
    }

    std::string bad_value(const std::string& section, const std::string& key,
                          const std::string& v) const {
        return origin_ + ": bad value '" + v + "' for [" + section + "] " + key;
    }

    long to_long(const std::string& section, const std::string& key, const std::string& v) const {
        std::size_t used = 0;
        long out = 0;
        try {
            out = std::stol(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != v.size() || v.empty()) {
            throw ConfigError(bad_value(section, key, v) + " (expected an integer)");
        }
        return out;
    }

    double to_double(const std::string& section, const std::string& key,
                     const std::string& v) const {
        std::size_t used = 0;
        double out = 0.0;
        try {
            out = std::stod(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != v.size() || v.empty()) {
            throw ConfigError(bad_value(section, key, v) + " (expected a number)");
        }
        return out;
    }

    std::string origin_;
    std::map<std::string, Section> sections_;
    std::vector<std::string> section_order_;
};

// Everything a run needs, resolved from one config file. All randomness
// derives from the single [run] seed through labeled streams (init, mask,
// data, kmeans) unless a section pins its own seed.
struct RunConfig {
    std::string matrix_path;
    std::string labels_path; // optional
    Stage stage = Stage::normalized;

    std::string preset = "tiny-test";
    ModelConfig model; // n_genes filled in from the data at load time

    MaskConfig mask;
    TrainConfig train;
    FinetuneConfig finetune;

    std::string outdir;
    std::string run_name = "run";
    std::uint64_t seed = 1;

    std::filesystem::path run_dir() const {
        return std::filesystem::path(outdir) / run_name;
    }

    std::uint64_t stream_seed(std::string_view label) const {
        return derive_seed(seed, label);
    }
};

namespace detail {

template <typename E>
E parse_enum(const ConfigFile& c, const std::string& section, const std::string& key,
             std::initializer_list<std::pair<const char*, E>> table, E fallback) {
    if (!c.has(section, key)) {
        return fallback;
    }
    const std::string v = c.get(section, key);
    std::string known;
    for (const auto& [name, value] : table) {
        if (v == name) {
            return value;
        }
        known += known.empty() ? name : std::string(", ") + name;
    }
    throw ConfigError(c.origin() + ": bad value '" + v + "' for [" + section + "] " + key +
                      " (expected one of " + known + ")");
}

} // namespace detail

inline RunConfig load_run_config(const ConfigFile& c) {
    RunConfig r;
    r.matrix_path = c.get("data", "matrix");
    r.labels_path = c.get_or("data", "labels", "");
    r.stage = detail::parse_enum(c, "data", "stage",
                                 {{"raw_counts", Stage::raw_counts},
                                  {"normalized", Stage::normalized}},
                                 Stage::normalized);

    r.seed = static_cast<std::uint64_t>(c.get_long_or("run", "seed", 1));
    r.outdir = c.get("run", "outdir");
    r.run_name = c.get_or("run", "name", "run");

    r.preset = c.get_or("model", "preset", "tiny-test");
    r.model = ModelConfig::preset(r.preset);
    r.model.seed = r.stream_seed("init");
    if (c.has("model", "n_genes")) {
        r.model.n_genes = static_cast<int>(c.get_long("model", "n_genes"));
    }
    r.model.bins = static_cast<int>(c.get_long_or("model", "bins", r.model.bins));
    auto stack = [&](const char* prefix, StackConfig s) {
        s.depth = static_cast<int>(c.get_long_or("model", std::string(prefix) + "_depth", s.depth));
        s.heads = static_cast<int>(c.get_long_or("model", std::string(prefix) + "_heads", s.heads));
        s.dim = static_cast<int>(c.get_long_or("model", std::string(prefix) + "_dim", s.dim));
        return s;
    };
    r.model.encoder = stack("encoder", r.model.encoder);
    r.model.decoder = stack("decoder", r.model.decoder);
    r.model.arch = detail::parse_enum(c, "model", "arch",
                                      {{"asymmetric", Architecture::asymmetric},
                                       {"encoder_only", Architecture::encoder_only}},
                                      r.model.arch);
    r.model.backend =
        detail::parse_enum(c, "model", "attention_backend",
                           {{"exact", AttentionBackend::exact},
                            {"linear_random_features", AttentionBackend::linear_random_features}},
                           r.model.backend);
    r.model.n_random_features = static_cast<int>(
        c.get_long_or("model", "n_random_features", r.model.n_random_features));
    r.model.ffn_multiplier =
        static_cast<int>(c.get_long_or("model", "ffn_multiplier", r.model.ffn_multiplier));
    r.model.value_mode = detail::parse_enum(c, "model", "value_mode",
                                            {{"auto_discretize", ValueEmbeddingMode::auto_discretize},
                                             {"round_bin", ValueEmbeddingMode::round_bin}},
                                            r.model.value_mode);
    r.model.objective = detail::parse_enum(c, "model", "objective",
                                           {{"regression", Objective::regression},
                                            {"classification", Objective::classification}},
                                           r.model.objective);
    r.model.n_value_classes =
        static_cast<int>(c.get_long_or("model", "n_value_classes", r.model.n_value_classes));

    r.mask.nonzero_mask_ratio =
        c.get_double_or("mask", "nonzero_mask_ratio", r.mask.nonzero_mask_ratio);
    r.mask.zero_mask_ratio = c.get_double_or("mask", "zero_mask_ratio", r.mask.zero_mask_ratio);
    if (c.has("mask", "replace_probs")) {
        const std::vector<double> probs = c.get_double_list("mask", "replace_probs");
        if (probs.size() != 3) {
            throw ConfigError(c.origin() + ": [mask] replace_probs needs exactly 3 values");
        }
        r.mask.replace_probs = {probs[0], probs[1], probs[2]};
    }
    r.mask.seed = c.has("mask", "seed")
                      ? static_cast<std::uint64_t>(c.get_long("mask", "seed"))
                      : r.stream_seed("mask");
    r.mask.validate();

    r.train.batch_size = static_cast<int>(c.get_long_or("train", "batch_size", r.train.batch_size));
    r.train.steps = static_cast<int>(c.get_long_or("train", "steps", r.train.steps));
    r.train.learning_rate = c.get_double_or("train", "learning_rate", r.train.learning_rate);
    r.train.beta1 = c.get_double_or("train", "beta1", r.train.beta1);
    r.train.beta2 = c.get_double_or("train", "beta2", r.train.beta2);
    r.train.eps = c.get_double_or("train", "eps", r.train.eps);
    r.train.grad_clip = c.get_double_or("train", "grad_clip", r.train.grad_clip);
    r.train.warmup_steps =
        static_cast<int>(c.get_long_or("train", "warmup_steps", r.train.warmup_steps));
    r.train.eval_every = static_cast<int>(c.get_long_or("train", "eval_every", r.train.eval_every));
    r.train.val_fraction = c.get_double_or("train", "val_fraction", r.train.val_fraction);
    r.train.fixed_complement_denominator = c.get_bool_or(
        "train", "fixed_complement_denominator", r.train.fixed_complement_denominator);
    r.train.seed = c.has("train", "seed") ? static_cast<std::uint64_t>(c.get_long("train", "seed"))
                                          : r.stream_seed("data");
    r.train.validate();

    r.finetune.steps = static_cast<int>(c.get_long_or("finetune", "steps", r.finetune.steps));
    r.finetune.batch_size =
        static_cast<int>(c.get_long_or("finetune", "batch_size", r.finetune.batch_size));
    r.finetune.learning_rate =
        c.get_double_or("finetune", "learning_rate", r.finetune.learning_rate);
    r.finetune.unfreeze_trunk =
        c.get_bool_or("finetune", "unfreeze_trunk", r.finetune.unfreeze_trunk);
    r.finetune.seed = c.has("finetune", "seed")
                          ? static_cast<std::uint64_t>(c.get_long("finetune", "seed"))
                          : r.stream_seed("data");
    r.finetune.validate();
    return r;
}

// Paths must exist before a run starts; catching this here gives a config
// error instead of a mid-run IO failure.
inline void check_run_paths(const RunConfig& r) {
    if (!std::filesystem::exists(r.matrix_path)) {
        throw ConfigError("[data] matrix path does not exist: " + r.matrix_path);
    }
    if (!r.labels_path.empty() && !std::filesystem::exists(r.labels_path)) {
        throw ConfigError("[data] labels path does not exist: " + r.labels_path);
    }
}

} // namespace sct
