#pragma once

#include <array>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ounet/core/rng.hpp"
#include "ounet/io/dataset.hpp"

namespace ounet::harness {

/// Desk-scale stand-in for the real dataset: a brain-shaped foreground
/// ellipsoid containing three nested tumor ellipsoids (ET inside TC inside
/// WT), with class-correlated modality intensities plus Gaussian noise.
struct SyntheticSpec {
    std::int64_t size = 64;
    int count = 4;
    std::uint64_t seed = 0;
    double noise = 0.1;
    bool with_labels = true;
    std::array<double, 2> wt_radius_frac{0.14, 0.20};  // of volume side
    std::array<double, 2> tc_of_wt{0.60, 0.75};
    std::array<double, 2> et_of_tc{0.50, 0.70};

    void validate() const {
        require(size >= 16, ErrorKind::config, "synthetic: size must be >= 16");
        require(count >= 1, ErrorKind::config, "synthetic: count >= 1");
        require(noise >= 0.0, ErrorKind::config, "synthetic: noise >= 0");
    }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = {{"size", s.size},           {"count", s.count},
         {"seed", s.seed},           {"noise", s.noise},
         {"with_labels", s.with_labels}, {"wt_radius_frac", s.wt_radius_frac},
         {"tc_of_wt", s.tc_of_wt},   {"et_of_tc", s.et_of_tc}};
}
inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    s = SyntheticSpec{};
    s.size = j.value("size", std::int64_t{64});
    s.count = j.value("count", 4);
    s.seed = j.value("seed", std::uint64_t{0});
    s.noise = j.value("noise", 0.1);
    s.with_labels = j.value("with_labels", true);
    if (j.contains("wt_radius_frac")) j.at("wt_radius_frac").get_to(s.wt_radius_frac);
    if (j.contains("tc_of_wt")) j.at("tc_of_wt").get_to(s.tc_of_wt);
    if (j.contains("et_of_tc")) j.at("et_of_tc").get_to(s.et_of_tc);
    s.validate();
}

struct SyntheticExampleInfo {
    std::string id;
    std::array<double, 3> tumor_center{};
    std::array<double, 3> wt_radii{}, tc_radii{}, et_radii{};
    double expected_wt_fraction = 0.0;  // ellipsoid volume / voxel count
};

inline void to_json(nlohmann::json& j, const SyntheticExampleInfo& e) {
    j = {{"id", e.id},
         {"tumor_center", e.tumor_center},
         {"wt_radii", e.wt_radii},
         {"tc_radii", e.tc_radii},
         {"et_radii", e.et_radii},
         {"expected_wt_fraction", e.expected_wt_fraction}};
}

/// Writes `count` BraTS-layout examples under out_dir and returns their
/// generation records. Deterministic for a fixed seed.
inline std::vector<SyntheticExampleInfo> generate_synthetic(const SyntheticSpec& spec,
                                                            const std::filesystem::path& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir);
    const std::int64_t n = spec.size;
    const double c = static_cast<double>(n - 1) / 2.0;

    std::vector<SyntheticExampleInfo> infos;
    RngStream master(splitmix64(spec.seed ^ 0x73796e7468ULL));
    for (int e = 0; e < spec.count; ++e) {
        RngStream rng = master.fork(static_cast<std::uint64_t>(e) + 1);
        std::ostringstream idos;
        idos << "synth" << std::setw(5) << std::setfill('0') << e;
        SyntheticExampleInfo info;
        info.id = idos.str();

        // Brain ellipsoid radii, slightly anisotropic.
        std::array<double, 3> brain{};
        for (auto& r : brain) r = rng.uniform(0.38, 0.45) * static_cast<double>(n);

        // Tumor geometry, kept inside the brain with margin.
        for (auto& x : info.tumor_center)
            x = c + rng.uniform(-0.12, 0.12) * static_cast<double>(n);
        for (int a = 0; a < 3; ++a) {
            info.wt_radii[static_cast<std::size_t>(a)] =
                rng.uniform(spec.wt_radius_frac[0], spec.wt_radius_frac[1]) * static_cast<double>(n);
            info.tc_radii[static_cast<std::size_t>(a)] =
                info.wt_radii[static_cast<std::size_t>(a)] * rng.uniform(spec.tc_of_wt[0], spec.tc_of_wt[1]);
            info.et_radii[static_cast<std::size_t>(a)] =
                info.tc_radii[static_cast<std::size_t>(a)] * rng.uniform(spec.et_of_tc[0], spec.et_of_tc[1]);
        }
        info.expected_wt_fraction = 4.0 / 3.0 * 3.14159265358979323846 * info.wt_radii[0] *
                                    info.wt_radii[1] * info.wt_radii[2] /
                                    static_cast<double>(n * n * n);

        auto inside = [&](const std::array<double, 3>& center, const std::array<double, 3>& radii,
                          std::int64_t h, std::int64_t w, std::int64_t d) {
            const double dh = (static_cast<double>(h) - center[0]) / radii[0];
            const double dw = (static_cast<double>(w) - center[1]) / radii[1];
            const double dd = (static_cast<double>(d) - center[2]) / radii[2];
            return dh * dh + dw * dw + dd * dd <= 1.0;
        };
        const std::array<double, 3> bc{c, c, c};

        Tensor<std::uint8_t> label({n, n, n}, 0);
        Tensor<float> image({4, n, n, n}, 0.0f);
        // Base tissue intensity per modality, plus class-dependent shifts
        // that make the regions separable: FLAIR and T2 light up the whole
        // tumor, T1Gd highlights ET, T1 darkens the core.
        const std::array<double, 4> base{0.8, 1.0, 0.9, 1.1};
        for (std::int64_t h = 0; h < n; ++h)
            for (std::int64_t w = 0; w < n; ++w)
                for (std::int64_t d = 0; d < n; ++d) {
                    if (!inside(bc, brain, h, w, d)) continue;
                    const bool in_wt = inside(info.tumor_center, info.wt_radii, h, w, d);
                    const bool in_tc = in_wt && inside(info.tumor_center, info.tc_radii, h, w, d);
                    const bool in_et = in_tc && inside(info.tumor_center, info.et_radii, h, w, d);
                    const std::uint8_t cls = in_et ? 4 : in_tc ? 1 : in_wt ? 2 : 0;
                    label.at(h, w, d) = cls;
                    for (int m = 0; m < 4; ++m) {
                        double v = base[static_cast<std::size_t>(m)];
                        if (m == 0 && in_wt) v += 1.2;               // flair
                        if (m == 1 && in_tc) v -= 0.5;               // t1
                        if (m == 2 && in_et) v += 1.5;               // t1ce
                        if (m == 3 && in_wt && !in_tc) v += 1.0;     // t2
                        v += rng.normal(0.0, spec.noise);
                        if (std::abs(v) < 1e-4) v = v < 0 ? -1e-4 : 1e-4;  // keep foreground nonzero
                        image.at(m, h, w, d) = static_cast<float>(v);
                    }
                }

        io::Affine affine = io::identity_affine();
        for (int a = 0; a < 3; ++a)
            affine[static_cast<std::size_t>(a)][3] = -c;
        const io::Spacing spacing{1.0, 1.0, 1.0};
        for (int m = 0; m < 4; ++m) {
            Tensor<float> vol({n, n, n});
            std::memcpy(vol.data(), image.data() + m * n * n * n,
                        sizeof(float) * static_cast<std::size_t>(n * n * n));
            io::write_nifti(out_dir / (info.id + "_" + io::kModalities[static_cast<std::size_t>(m)] +
                                       ".nii.gz"),
                            vol, spacing, affine);
        }
        if (spec.with_labels)
            io::write_nifti(out_dir / (info.id + "_seg.nii.gz"), label, spacing, affine);
        infos.push_back(info);
    }

    nlohmann::json side;
    side["spec"] = spec;
    side["examples"] = infos;
    std::ofstream f(out_dir / "synthetic_info.json", std::ios::trunc);
    f << side.dump(2) << "\n";
    return infos;
}

}  // namespace ounet::harness
