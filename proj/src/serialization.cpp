#include "ibca/serialization.hpp"

#include "ibca/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

namespace ibca {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

void write_doubles(std::ostream& out, const double* data, std::size_t n) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::istream& in, double* data, std::size_t n, const fs::path& path) {
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(n * sizeof(double))) {
        throw IoError("'" + path.string() + "': truncated payload");
    }
}

}  // namespace

void save_checkpoint(const fs::path& path, const RunConfig& config, const Model& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    RunConfig cfg = config;
    cfg.model = model.config;
    cfg.train.variant = model.variant;
    out << "IBCA-CHECKPOINT 1\n";
    for (const auto& [key, value] : to_key_values(cfg)) out << "config " << key << " " << value << "\n";
    for (const auto& [name, value] : model.params) {
        out << "tensor " << name << " " << value.rows() << " " << value.cols() << "\n";
    }
    out << "end\n";
    for (const auto& [name, value] : model.params) write_doubles(out, value.data(), static_cast<std::size_t>(value.size()));
    if (!out) throw IoError("short write to checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != "IBCA-CHECKPOINT 1") {
        throw IoError("'" + path.string() + "' is not an IBCA checkpoint");
    }
    Checkpoint ck;
    ck.config = desk_preset();
    std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> tensors;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            ended = true;
            break;
        }
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "config") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            if (key == "run.preset") ck.config.preset = value;
            else apply_setting(ck.config, key, value);
        } else if (kind == "tensor") {
            std::string name;
            Eigen::Index rows = 0, cols = 0;
            if (!(ls >> name >> rows >> cols) || rows < 0 || cols < 0) {
                throw IoError("'" + path.string() + "': malformed tensor line '" + line + "'");
            }
            tensors.push_back({name, {rows, cols}});
        } else {
            throw IoError("'" + path.string() + "': unexpected header line '" + line + "'");
        }
    }
    if (!ended) throw IoError("'" + path.string() + "': header has no 'end' line");
    ck.model.config = ck.config.model;
    ck.model.variant = ck.config.train.variant;
    for (const auto& [name, shape] : tensors) {
        Matrix m(shape.first, shape.second);
        read_doubles(in, m.data(), static_cast<std::size_t>(m.size()), path);
        ck.model.params.emplace(name, std::move(m));
    }
    // Structural check against a fresh model of the same configuration.
    Model reference = init_model(ck.model.config, ck.model.variant, 0);
    for (const auto& [name, value] : reference.params) {
        auto it = ck.model.params.find(name);
        if (it == ck.model.params.end()) throw IoError("'" + path.string() + "': missing tensor '" + name + "'");
        if (it->second.rows() != value.rows() || it->second.cols() != value.cols()) {
            throw IoError("'" + path.string() + "': tensor '" + name + "' has the wrong shape");
        }
    }
    if (reference.params.size() != ck.model.params.size()) {
        throw IoError("'" + path.string() + "': unexpected extra tensors");
    }
    return ck;
}

std::string checkpoint_manifest(const Model& model) {
    std::ostringstream os;
    for (const auto& [name, value] : model.params) os << name << " " << value.rows() << "x" << value.cols() << "\n";
    return os.str();
}

void write_raw_tensor(const fs::path& path, const RawTensor& tensor) {
    const std::size_t count =
        std::accumulate(tensor.shape.begin(), tensor.shape.end(), std::size_t{1}, std::multiplies<>());
    if (tensor.shape.empty() || count != tensor.data.size()) {
        throw ShapeError("write_raw_tensor: shape does not match data length");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << "IBCA-TENSOR dtype=float64 shape=";
    for (std::size_t i = 0; i < tensor.shape.size(); ++i) out << (i ? "x" : "") << tensor.shape[i];
    out << "\n";
    write_doubles(out, tensor.data.data(), tensor.data.size());
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

RawTensor read_raw_tensor(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    std::getline(in, line);
    const std::string prefix = "IBCA-TENSOR dtype=float64 shape=";
    if (line.rfind(prefix, 0) != 0) throw IoError("'" + path.string() + "': not a raw IBCA tensor");
    RawTensor t;
    std::istringstream dims(line.substr(prefix.size()));
    std::string d;
    while (std::getline(dims, d, 'x')) {
        try {
            t.shape.push_back(static_cast<std::size_t>(std::stoull(d)));
        } catch (const std::exception&) {
            throw IoError("'" + path.string() + "': bad shape '" + line + "'");
        }
    }
    if (t.shape.empty()) throw IoError("'" + path.string() + "': empty shape");
    const std::size_t count = std::accumulate(t.shape.begin(), t.shape.end(), std::size_t{1}, std::multiplies<>());
    t.data.resize(count);
    read_doubles(in, t.data.data(), count, path);
    return t;
}

}  // namespace ibca
