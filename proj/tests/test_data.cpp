#include "doctest.h"

#include "ibca/data.hpp"
#include "ibca/errors.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace ibca;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("ibca_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_CASE("manifest rows parse into label vectors") {
    Manifest m = parse_manifest("path,a,b,c,d\nimg/001.png,1,0,1,0\nimg/002.png,0,0,0,1\n");
    CHECK(m.n_classes() == 4);
    REQUIRE(m.rows.size() == 2);
    CHECK(m.rows[0].path == "img/001.png");
    CHECK(m.rows[0].labels == std::vector<int>{1, 0, 1, 0});
    CHECK(parse_manifest(format_manifest(m)).rows[1].labels == m.rows[1].labels);
}

TEST_CASE("manifest errors name the problem") {
    CHECK(error_of([] { parse_manifest("path,a,b\n"); }).find("no samples") != std::string::npos);
    const std::string bad = error_of([] { parse_manifest("path,a,b\nx.png,0,1\ny.png,1,2\n"); });
    CHECK(bad.find("line 3") != std::string::npos);
    CHECK(bad.find("column 3") != std::string::npos);
    CHECK(error_of([] { parse_manifest("path,a,b\nx.png,0\n"); }).find("line 2") != std::string::npos);
    CHECK_THROWS_AS(parse_manifest("file,a\nx.png,1\n"), IoError);
    CHECK_THROWS_AS(load_manifest("/nonexistent/manifest.csv"), IoError);
}

TEST_CASE("split sizes follow floor arithmetic") {
    SplitIndices endo = split_indices(3865, {0.8, 0.1, 0.1}, 0);
    CHECK(endo.train.size() == 3092);
    CHECK(endo.val.size() == 386);
    CHECK(endo.test.size() == 387);
    SplitIndices ten = split_indices(10, {0.8, 0.1, 0.1}, 0);
    CHECK(ten.train.size() == 8);
    CHECK(ten.val.size() == 1);
    CHECK(ten.test.size() == 1);
    CHECK_THROWS_AS(split_indices(10, {0.5, 0.1, 0.1}, 0), ConfigError);
}

TEST_CASE("splits are seeded, disjoint and exhaustive") {
    for (std::size_t n = 3; n < 60; n += 7) {
        SplitIndices a = split_indices(n, {0.8, 0.1, 0.1}, 11);
        SplitIndices b = split_indices(n, {0.8, 0.1, 0.1}, 11);
        CHECK(a.train == b.train);
        CHECK(a.test == b.test);
        std::set<std::size_t> all(a.train.begin(), a.train.end());
        all.insert(a.val.begin(), a.val.end());
        all.insert(a.test.begin(), a.test.end());
        CHECK(all.size() == n);
        CHECK(a.train.size() + a.val.size() + a.test.size() == n);
    }
    CHECK(split_indices(50, {0.8, 0.1, 0.1}, 1).train != split_indices(50, {0.8, 0.1, 0.1}, 2).train);
}

TEST_CASE("preprocess standardizes a constant image to a constant tensor") {
    Image img{5, 7, 3, std::vector<std::uint8_t>(5 * 7 * 3, 128)};
    NormalizationConfig norm;
    ImageTensor t = preprocess(img, 16, norm);
    CHECK(t.rows() == 3);
    CHECK(t.cols() == 16 * 16);
    const double expected = (128.0 / 255.0 - norm.mean[0]) / norm.stddev[0];
    CHECK((t.array() - expected).abs().maxCoeff() < 1e-12);
}

TEST_CASE("grayscale input is replicated to three channels") {
    Image img{4, 4, 1, std::vector<std::uint8_t>(16)};
    for (int i = 0; i < 16; ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 10);
    ImageTensor t = preprocess(img, 4);
    CHECK(t.rows() == 3);
    CHECK(t.row(0) == t.row(1));
    CHECK(t.row(1) == t.row(2));
}

TEST_CASE("images round-trip through PNM and decode identically twice") {
    fs::path dir = scratch("pnm");
    Image img{6, 3, 3, {}};
    for (int i = 0; i < 6 * 3 * 3; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 7));
    write_pnm(dir / "a.ppm", img);
    Image back = read_image(dir / "a.ppm");
    CHECK(back.width == 6);
    CHECK(back.height == 3);
    CHECK(back.pixels == img.pixels);
    CHECK(preprocess_file(dir / "a.ppm", 8) == preprocess_file(dir / "a.ppm", 8));

    std::ofstream(dir / "junk.png") << "not an image";
    CHECK_THROWS_AS(read_image(dir / "junk.png"), IoError);
}

TEST_CASE("synthetic data is deterministic under a seed") {
    SyntheticSpec spec;
    spec.n_samples = 60;
    spec.noise = 0.0;
    SyntheticDataset a = generate_synthetic(spec);
    SyntheticDataset b = generate_synthetic(spec);
    CHECK(a.labels == b.labels);
    for (std::size_t i = 0; i < a.images.size(); ++i) CHECK(a.images[i].pixels == b.images[i].pixels);
    spec.seed = 1;
    CHECK(generate_synthetic(spec).labels != a.labels);
}

TEST_CASE("full confounding ties the background to the first label") {
    SyntheticSpec spec;
    spec.n_samples = 300;
    spec.rho_train = 1.0;
    SyntheticDataset d = generate_synthetic(spec);
    for (std::size_t i : d.splits.train) CHECK(d.metadata[i].background == static_cast<int>(d.labels(i, 0)));
}

TEST_CASE("background correlation and label marginals match the specification") {
    SyntheticSpec spec;
    spec.n_samples = 2500;
    SyntheticDataset d = generate_synthetic(spec);
    const auto& train = d.splits.train;
    REQUIRE(train.size() == 2000);
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i : train) {
        const double x = d.metadata[i].background, y = d.labels(i, 0);
        sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y;
    }
    const double n = static_cast<double>(train.size());
    const double corr = (sxy / n - sx / n * sy / n) /
                        std::sqrt((sxx / n - sx * sx / n / n) * (syy / n - sy * sy / n / n));
    CHECK(std::abs(corr - 0.9) < 0.05);

    const double sd = std::sqrt(spec.label_rate * (1 - spec.label_rate) / n);
    for (int k = 0; k < spec.n_classes; ++k) {
        double rate = 0;
        for (std::size_t i : train) rate += d.labels(i, k);
        CHECK(std::abs(rate / n - spec.label_rate) < 3 * sd);
    }
}

TEST_CASE("stamp metadata matches the rendered patterns") {
    SyntheticSpec spec;
    spec.n_samples = 200;
    spec.noise = 0.0;
    SyntheticDataset d = generate_synthetic(spec);
    int checked = 0;
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        const auto& meta = d.metadata[i];
        int active = 0, which = -1;
        for (int k = 0; k < spec.n_classes; ++k) {
            if (!meta.stamps[k]) continue;
            ++active;
            which = k;
            const int r = pattern_radius(k);
            CHECK(meta.stamps[k]->x >= r);
            CHECK(meta.stamps[k]->y >= r);
            CHECK(meta.stamps[k]->x < spec.image_size - r);
            CHECK(meta.stamps[k]->y < spec.image_size - r);
        }
        if (active != 1) continue;
        // With one stamp and no noise, the bright pixels are exactly the pattern.
        std::set<std::pair<int, int>> bright, expected;
        for (int y = 0; y < spec.image_size; ++y)
            for (int x = 0; x < spec.image_size; ++x)
                if (d.images[i].at(x, y, 0) > 0.7 * 255) bright.insert({x, y});
        for (const auto& [dx, dy] : pattern_offsets(which)) expected.insert({meta.stamps[which]->x + dx, meta.stamps[which]->y + dy});
        CHECK(bright == expected);
        ++checked;
    }
    CHECK(checked > 20);
}

TEST_CASE("patterns are distinct per class") {
    std::set<std::vector<std::array<int, 2>>> seen;
    for (int k = 0; k < 8; ++k) seen.insert(pattern_offsets(k));
    CHECK(seen.size() == 8);
    SyntheticSpec tiny;
    tiny.image_size = 6;
    CHECK_THROWS_AS(generate_synthetic(tiny), ConfigError);
}

TEST_CASE("synthetic datasets are written with manifests and metadata") {
    fs::path dir = scratch("synth");
    SyntheticSpec spec;
    spec.n_samples = 20;
    spec.rho_train = 0.9;
    spec.rho_test = 0.0;
    SyntheticDataset d = generate_synthetic(spec);
    write_synthetic(d, dir);
    Manifest m = load_manifest(dir / "manifest.csv");
    CHECK(m.rows.size() == 20);
    CHECK(load_manifest(dir / "train.csv").rows.size() == 16);
    CHECK(fs::exists(dir / "metadata.csv"));
    std::ifstream spec_file(dir / "spec.txt");
    std::string text((std::istreambuf_iterator<char>(spec_file)), std::istreambuf_iterator<char>());
    CHECK(text.find("rho_train=0.9\n") != std::string::npos);
    CHECK(text.find("rho_test=0\n") != std::string::npos);

    Dataset loaded = load_dataset(m, 32);
    Dataset direct;
    for (std::size_t i = 0; i < d.images.size(); ++i) direct.images.push_back(preprocess(d.images[i], 32));
    CHECK(loaded.images[5] == direct.images[5]);
    CHECK(loaded.labels == d.labels);
}
