#include "ibca/data.hpp"

#include "ibca/errors.hpp"

#include "ibca/random.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ibca {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Image I/O

namespace {

Image read_pnm(const fs::path& path, std::istream& in) {
    std::string magic;
    in >> magic;
    auto next_int = [&]() {
        in >> std::ws;
        while (in.peek() == '#') {
            std::string comment;
            std::getline(in, comment);
            in >> std::ws;
        }
        int v = 0;
        if (!(in >> v)) throw IoError("undecodable image '" + path.string() + "': bad PNM header");
        return v;
    };
    Image img;
    img.channels = magic == "P6" ? 3 : 1;
    img.width = next_int();
    img.height = next_int();
    const int maxval = next_int();
    if (img.width <= 0 || img.height <= 0 || maxval != 255) {
        throw IoError("undecodable image '" + path.string() + "': only 8-bit PNM is supported");
    }
    in.get();
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw IoError("undecodable image '" + path.string() + "': truncated pixel data");
    }
    return img;
}

Image read_png(const fs::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str())) {
        throw IoError("undecodable image '" + path.string() + "': " + png.message);
    }
    png.format = PNG_FORMAT_RGB;
    Image img;
    img.width = static_cast<int>(png.width);
    img.height = static_cast<int>(png.height);
    img.channels = 3;
    img.pixels.resize(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
        png_image_free(&png);
        throw IoError("undecodable image '" + path.string() + "': " + png.message);
    }
    return img;
}

}  // namespace

Image read_image(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image '" + path.string() + "'");
    char sig[8] = {};
    in.read(sig, 8);
    const auto got = in.gcount();
    if (got >= 2 && sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) {
        in.clear();
        in.seekg(0);
        return read_pnm(path, in);
    }
    static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (got == 8 && std::memcmp(sig, png_sig, 8) == 0) {
        in.close();
        return read_png(path);
    }
    throw IoError("undecodable image '" + path.string() + "': unsupported format");
}

void write_pnm(const fs::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw IoError("write_pnm: need 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << (image.channels == 3 ? "P6" : "P5") << "\n" << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

ImageTensor preprocess(const Image& image, int image_size, const NormalizationConfig& norm) {
    if (image.width <= 0 || image.height <= 0 || image.channels <= 0 ||
        image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
        throw IoError("preprocess: malformed image buffer");
    }
    if (image_size <= 0) throw ConfigError("preprocess: image_size must be positive");
    const int s = image_size;
    ImageTensor out(3, static_cast<Eigen::Index>(s) * s);
    const double sx = static_cast<double>(image.width) / s;
    const double sy = static_cast<double>(image.height) / s;
    for (int y = 0; y < s; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < s; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const int src_c = image.channels >= 3 ? c : 0;
                const double v = (1 - wy) * ((1 - wx) * image.at(x0, y0, src_c) + wx * image.at(x1, y0, src_c)) +
                                 wy * ((1 - wx) * image.at(x0, y1, src_c) + wx * image.at(x1, y1, src_c));
                out(c, y * s + x) = (v / 255.0 - norm.mean[c]) / norm.stddev[c];
            }
        }
    }
    return out;
}

ImageTensor preprocess_file(const fs::path& path, int image_size, const NormalizationConfig& norm) {
    return preprocess(read_image(path), image_size, norm);
}

// ---------------------------------------------------------------------------
// Manifests

Manifest Manifest::subset(const std::vector<std::size_t>& index) const {
    Manifest out;
    out.class_names = class_names;
    out.base_dir = base_dir;
    out.rows.reserve(index.size());
    for (std::size_t i : index) out.rows.push_back(rows.at(i));
    return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace

Manifest parse_manifest(const std::string& text, const fs::path& base_dir) {
    Manifest m;
    m.base_dir = base_dir;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto cells = split_csv_line(line);
        if (!header) {
            if (cells.size() < 2 || cells[0] != "path") {
                throw IoError("manifest line " + std::to_string(line_no) +
                              ": header must be 'path,<class_0>,...,<class_{C-1}>'");
            }
            m.class_names.assign(cells.begin() + 1, cells.end());
            header = true;
            continue;
        }
        if (cells.size() != m.class_names.size() + 1) {
            throw IoError("manifest line " + std::to_string(line_no) + ": expected " +
                          std::to_string(m.class_names.size() + 1) + " cells, found " + std::to_string(cells.size()));
        }
        ManifestRow row;
        row.path = cells[0];
        if (row.path.empty()) throw IoError("manifest line " + std::to_string(line_no) + ": empty path");
        for (std::size_t c = 1; c < cells.size(); ++c) {
            if (cells[c] != "0" && cells[c] != "1") {
                throw IoError("manifest line " + std::to_string(line_no) + ", column " + std::to_string(c + 1) +
                              " (" + m.class_names[c - 1] + "): label '" + cells[c] + "' is not 0 or 1");
            }
            row.labels.push_back(cells[c] == "1" ? 1 : 0);
        }
        m.rows.push_back(std::move(row));
    }
    if (!header) throw IoError("manifest: missing header row");
    if (m.rows.empty()) throw IoError("manifest: no samples");
    return m;
}

Manifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_manifest(buf.str(), path.parent_path());
}

std::string format_manifest(const Manifest& manifest) {
    std::ostringstream os;
    os << "path";
    for (const auto& name : manifest.class_names) os << "," << name;
    os << "\n";
    for (const auto& row : manifest.rows) {
        os << row.path;
        for (int v : row.labels) os << "," << v;
        os << "\n";
    }
    return os.str();
}

void save_manifest(const fs::path& path, const Manifest& manifest) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
    out << format_manifest(manifest);
}

SplitIndices split_indices(std::size_t n, std::array<double, 3> ratios, std::uint64_t seed) {
    const double total = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
        throw ConfigError("split: ratios must be non-negative and sum to 1");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());
    const auto n_train = static_cast<std::size_t>(std::floor(ratios[0] * static_cast<double>(n) + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(ratios[1] * static_cast<double>(n) + 1e-9));
    SplitIndices s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return s;
}

ManifestSplit split(const Manifest& manifest, std::array<double, 3> ratios, std::uint64_t seed) {
    SplitIndices s = split_indices(manifest.rows.size(), ratios, seed);
    return ManifestSplit{manifest.subset(s.train), manifest.subset(s.val), manifest.subset(s.test)};
}

Dataset load_dataset(const Manifest& manifest, int image_size, const NormalizationConfig& norm,
                     const std::string& image_root) {
    Dataset d;
    const fs::path root = image_root.empty() ? manifest.base_dir : fs::path(image_root);
    d.images.reserve(manifest.rows.size());
    d.labels.resize(static_cast<Eigen::Index>(manifest.rows.size()), static_cast<Eigen::Index>(manifest.n_classes()));
    for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
        const auto& row = manifest.rows[i];
        fs::path p(row.path);
        if (p.is_relative()) p = root / p;
        d.images.push_back(preprocess_file(p, image_size, norm));
        for (std::size_t k = 0; k < row.labels.size(); ++k) {
            d.labels(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = row.labels[k];
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticSpec::validate() const {
    if (n_classes <= 0) throw ConfigError("synthetic.n_classes must be positive");
    if (n_samples <= 0) throw ConfigError("synthetic.n_samples must be positive");
    if (image_size <= 0) throw ConfigError("synthetic.image_size must be positive");
    auto unit = [](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("synthetic.") + name + " must lie in [0, 1]");
    };
    unit(rho_train, "rho_train");
    unit(rho_test, "rho_test");
    unit(label_rate, "label_rate");
    unit(cooccurrence, "cooccurrence");
    if (!(noise >= 0.0)) throw ConfigError("synthetic.noise must be >= 0");
    int largest = 0;
    for (int k = 0; k < n_classes; ++k) largest = std::max(largest, pattern_radius(k));
    if (image_size < 2 * largest + 1) {
        throw ConfigError("synthetic: image_size " + std::to_string(image_size) + " is too small for a pattern of radius " +
                          std::to_string(largest) + " (needs >= " + std::to_string(2 * largest + 1) + ")");
    }
}

std::string_view to_string(SplitName s) {
    switch (s) {
        case SplitName::train: return "train";
        case SplitName::val: return "val";
        case SplitName::test: return "test";
    }
    return "unknown";
}

PatternShape pattern_shape(int class_index) { return static_cast<PatternShape>(class_index % 4); }

int pattern_radius(int class_index) { return 3 + class_index / 4; }

std::vector<std::array<int, 2>> pattern_offsets(int class_index) {
    const int r = pattern_radius(class_index);
    std::vector<std::array<int, 2>> out;
    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            const int d2 = dx * dx + dy * dy;
            bool on = false;
            switch (pattern_shape(class_index)) {
                case PatternShape::disk: on = d2 <= r * r; break;
                case PatternShape::bar: on = std::abs(dy) <= 1; break;
                case PatternShape::ring: on = d2 <= r * r && d2 >= (r - 1) * (r - 1); break;
                case PatternShape::cross: on = dx == 0 || dy == 0; break;
            }
            if (on) out.push_back({dx, dy});
        }
    }
    return out;
}

namespace {

constexpr double kBackgroundBase = 0.3;
constexpr double kStripeAmplitude = 0.15;
constexpr double kStampIntensity = 0.5;

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticDataset out;
    out.spec = spec;
    const int s = spec.image_size;
    const int nc = spec.n_classes;
    const auto n = static_cast<std::size_t>(spec.n_samples);
    for (int k = 0; k < nc; ++k) out.class_names.push_back("class_" + std::to_string(k));
    out.splits = split_indices(n, spec.ratios, spec.seed ^ 0x53504c4954ULL);

    std::vector<SplitName> membership(n, SplitName::train);
    for (std::size_t i : out.splits.val) membership[i] = SplitName::val;
    for (std::size_t i : out.splits.test) membership[i] = SplitName::test;

    out.images.resize(n);
    out.metadata.resize(n);
    out.labels = Matrix::Zero(static_cast<Eigen::Index>(n), nc);
    const Rng root(spec.seed);
    std::vector<double> canvas(static_cast<std::size_t>(3) * s * s);

    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = root.split(i);
        SampleMetadata& meta = out.metadata[i];
        meta.split = membership[i];
        meta.stamps.assign(static_cast<std::size_t>(nc), std::nullopt);

        const bool shared = rng.bernoulli(spec.label_rate);
        for (int k = 0; k < nc; ++k) {
            const bool copy = rng.bernoulli(spec.cooccurrence);
            const bool own = rng.bernoulli(spec.label_rate);
            out.labels(static_cast<Eigen::Index>(i), k) = (copy ? shared : own) ? 1.0 : 0.0;
        }

        const double rho = meta.split == SplitName::test ? spec.rho_test : spec.rho_train;
        const bool tied = rng.bernoulli(rho);
        const bool independent = rng.bernoulli(spec.label_rate);
        meta.background = tied ? static_cast<int>(out.labels(static_cast<Eigen::Index>(i), 0)) : (independent ? 1 : 0);

        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                const int phase = meta.background == 0 ? y : x;
                const double v = kBackgroundBase + kStripeAmplitude * ((phase / 2) % 2);
                for (int c = 0; c < 3; ++c) canvas[(static_cast<std::size_t>(c) * s + y) * s + x] = v;
            }
        }
        for (int k = 0; k < nc; ++k) {
            if (out.labels(static_cast<Eigen::Index>(i), k) < 0.5) continue;
            const int r = pattern_radius(k);
            const StampLocation at{rng.uniform_int(r, s - 1 - r), rng.uniform_int(r, s - 1 - r)};
            meta.stamps[static_cast<std::size_t>(k)] = at;
            for (const auto& [dx, dy] : pattern_offsets(k)) {
                for (int c = 0; c < 3; ++c) {
                    canvas[(static_cast<std::size_t>(c) * s + at.y + dy) * s + at.x + dx] += kStampIntensity;
                }
            }
        }

        Image& img = out.images[i];
        img.width = s;
        img.height = s;
        img.channels = 3;
        img.pixels.resize(static_cast<std::size_t>(3) * s * s);
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                for (int c = 0; c < 3; ++c) {
                    double v = canvas[(static_cast<std::size_t>(c) * s + y) * s + x];
                    if (spec.noise > 0.0) v += spec.noise * rng.normal();
                    v = std::clamp(v, 0.0, 1.0);
                    img.pixels[(static_cast<std::size_t>(y) * s + x) * 3 + c] =
                        static_cast<std::uint8_t>(std::lround(v * 255.0));
                }
            }
        }
    }
    return out;
}

Dataset synthetic_split(const SyntheticDataset& data, SplitName which, int image_size,
                        const NormalizationConfig& norm) {
    const std::vector<std::size_t>& idx =
        which == SplitName::train ? data.splits.train : which == SplitName::val ? data.splits.val : data.splits.test;
    Dataset d;
    d.images.reserve(idx.size());
    d.labels.resize(static_cast<Eigen::Index>(idx.size()), data.labels.cols());
    for (std::size_t j = 0; j < idx.size(); ++j) {
        d.images.push_back(preprocess(data.images[idx[j]], image_size, norm));
        d.labels.row(static_cast<Eigen::Index>(j)) = data.labels.row(static_cast<Eigen::Index>(idx[j]));
    }
    return d;
}

void write_synthetic(const SyntheticDataset& data, const fs::path& dir) {
    fs::create_directories(dir / "images");
    Manifest all;
    all.class_names = data.class_names;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        std::ostringstream name;
        name << "images/" << std::setw(6) << std::setfill('0') << i << ".ppm";
        write_pnm(dir / name.str(), data.images[i]);
        ManifestRow row{name.str(), {}};
        for (Eigen::Index k = 0; k < data.labels.cols(); ++k) {
            row.labels.push_back(data.labels(static_cast<Eigen::Index>(i), k) > 0.5 ? 1 : 0);
        }
        all.rows.push_back(std::move(row));
    }
    save_manifest(dir / "manifest.csv", all);
    save_manifest(dir / "train.csv", all.subset(data.splits.train));
    save_manifest(dir / "val.csv", all.subset(data.splits.val));
    save_manifest(dir / "test.csv", all.subset(data.splits.test));

    std::ofstream meta(dir / "metadata.csv");
    if (!meta) throw IoError("cannot write metadata in '" + dir.string() + "'");
    meta << "index,path,split,background";
    for (const auto& name : data.class_names) meta << "," << name << "_x," << name << "_y";
    meta << "\n";
    for (std::size_t i = 0; i < data.metadata.size(); ++i) {
        const SampleMetadata& m = data.metadata[i];
        meta << i << "," << all.rows[i].path << "," << to_string(m.split) << "," << m.background;
        for (const auto& st : m.stamps) {
            if (st) meta << "," << st->x << "," << st->y;
            else meta << ",-1,-1";
        }
        meta << "\n";
    }

    std::ofstream spec(dir / "spec.txt");
    if (!spec) throw IoError("cannot write spec.txt in '" + dir.string() + "'");
    const SyntheticSpec& s = data.spec;
    auto num = [](double v) {
        char buf[32];
        return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
    };
    spec << "n_classes=" << s.n_classes << "\nimage_size=" << s.image_size << "\nn_samples=" << s.n_samples
         << "\nrho_train=" << num(s.rho_train) << "\nrho_test=" << num(s.rho_test)
         << "\nlabel_rate=" << num(s.label_rate) << "\ncooccurrence=" << num(s.cooccurrence)
         << "\nnoise=" << num(s.noise) << "\nseed=" << s.seed << "\nratios=" << num(s.ratios[0]) << ","
         << num(s.ratios[1]) << "," << num(s.ratios[2]) << "\n";
}

}  // namespace ibca
