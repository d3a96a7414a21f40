#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "ounet/io/nifti.hpp"

namespace ounet::io {

/// Fixed input channel order.
inline constexpr std::array<const char*, 4> kModalities = {"flair", "t1", "t1ce", "t2"};

struct MriExample {
    std::string id;
    Tensor<float> image;  // [4,H,W,D], channels in kModalities order
    std::optional<Tensor<std::uint8_t>> label;  // [H,W,D], classes {0,1,2,4}
    Spacing spacing{1.0, 1.0, 1.0};
    Affine affine = identity_affine();
};

/// Dataset layout: one directory holding {id}_{flair|t1|t1ce|t2}.nii.gz
/// per example, plus {id}_seg.nii.gz when labels exist. Label presence is
/// uniform across the directory.
struct DatasetIndex {
    std::filesystem::path root;
    std::vector<std::string> ids;  // lexicographically sorted
    bool has_labels = false;

    std::filesystem::path modality_path(const std::string& id, int m) const {
        return root / (id + "_" + kModalities[static_cast<std::size_t>(m)] + ".nii.gz");
    }
    std::filesystem::path seg_path(const std::string& id) const {
        return root / (id + "_seg.nii.gz");
    }
    bool contains(const std::string& id) const {
        return std::binary_search(ids.begin(), ids.end(), id);
    }
};

inline DatasetIndex scan_dataset(const std::filesystem::path& root) {
    require(std::filesystem::is_directory(root), ErrorKind::dataset,
            "dataset root is not a directory: ", root.string());

    std::map<std::string, std::set<std::string>> parts;  // id -> suffixes present
    for (const auto& entry : std::filesystem::directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        const std::string tail = ".nii.gz";
        if (name.size() <= tail.size() || name.substr(name.size() - tail.size()) != tail) continue;
        name = name.substr(0, name.size() - tail.size());
        const auto us = name.rfind('_');
        if (us == std::string::npos) continue;
        const std::string id = name.substr(0, us);
        const std::string suffix = name.substr(us + 1);
        const bool known = suffix == "seg" || std::any_of(kModalities.begin(), kModalities.end(),
                                                          [&](const char* m) { return suffix == m; });
        if (known && !id.empty()) parts[id].insert(suffix);
    }

    DatasetIndex index;
    index.root = root;
    std::size_t with_seg = 0;
    for (const auto& [id, suffixes] : parts) {
        for (const char* m : kModalities)
            require(suffixes.count(m) == 1, ErrorKind::dataset, "example '", id,
                    "' is missing the ", m, " modality file (", id, "_", m, ".nii.gz)");
        index.ids.push_back(id);
        with_seg += suffixes.count("seg");
    }
    require(with_seg == 0 || with_seg == index.ids.size(), ErrorKind::dataset,
            "segmentation files must be present for all examples or none (found ", with_seg,
            " of ", index.ids.size(), ")");
    index.has_labels = with_seg > 0 && with_seg == index.ids.size();
    return index;  // ids sorted by std::map ordering
}

namespace iodetail {

inline bool affine_close(const Affine& a, const Affine& b) {
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if (std::abs(a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] -
                         b[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) > 1e-4)
                return false;
    return true;
}

}  // namespace iodetail

/// Loads the 4 modalities into a [4,H,W,D] float stack (plus the label
/// volume when present). Spatial metadata is taken from the FLAIR file;
/// divergent affines in other modalities only warn.
inline MriExample load_example(const DatasetIndex& index, const std::string& id) {
    require(index.contains(id), ErrorKind::dataset, "id '", id, "' not in dataset index");
    MriExample ex;
    ex.id = id;
    for (int m = 0; m < 4; ++m) {
        const auto path = index.modality_path(id, m);
        NiftiImage img = read_nifti(path);
        require(img.data.rank() == 3, ErrorKind::shape, "modality file is not 3-D: ", path.string());
        if (m == 0) {
            ex.spacing = img.spacing;
            ex.affine = img.affine;
            ex.image = Tensor<float>({4, img.data.dim(0), img.data.dim(1), img.data.dim(2)});
        } else {
            require(img.data.dim(0) == ex.image.dim(1) && img.data.dim(1) == ex.image.dim(2) &&
                        img.data.dim(2) == ex.image.dim(3),
                    ErrorKind::shape, "modality shape mismatch for '", id, "': ", kModalities[static_cast<std::size_t>(m)],
                    " is ", shape_str(img.data.shape()), ", flair is (", ex.image.dim(1), ",",
                    ex.image.dim(2), ",", ex.image.dim(3), ")");
            if (!iodetail::affine_close(img.affine, ex.affine))
                std::cerr << "[warn] affine of " << path.string()
                          << " differs from flair; using flair's\n";
        }
        std::memcpy(ex.image.data() + m * img.data.numel(), img.data.data(),
                    sizeof(float) * static_cast<std::size_t>(img.data.numel()));
    }

    if (index.has_labels) {
        const auto path = index.seg_path(id);
        NiftiImage seg = read_nifti(path);
        require(seg.data.rank() == 3, ErrorKind::shape, "label file is not 3-D: ", path.string());
        require(seg.data.dim(0) == ex.image.dim(1) && seg.data.dim(1) == ex.image.dim(2) &&
                    seg.data.dim(2) == ex.image.dim(3),
                ErrorKind::shape, "label shape mismatch for '", id, "'");
        Tensor<std::uint8_t> label(seg.data.shape());
        for (std::int64_t i = 0; i < seg.data.numel(); ++i) {
            const float v = seg.data[i];
            require(v == 0.0f || v == 1.0f || v == 2.0f || v == 4.0f, ErrorKind::validation,
                    "label of '", id, "' contains class value ", v, " outside {0,1,2,4}");
            label[i] = static_cast<std::uint8_t>(v);
        }
        ex.label = std::move(label);
    }
    return ex;
}

/// Writes a class-label volume next to the reference example's metadata.
/// The label must already be in the original (pre-crop) frame.
inline void save_prediction(const Tensor<std::uint8_t>& label, const MriExample& reference,
                            const std::filesystem::path& path) {
    require(label.rank() == 3, ErrorKind::shape, "save_prediction: label must be [H,W,D]");
    require(label.dim(0) == reference.image.dim(1) && label.dim(1) == reference.image.dim(2) &&
                label.dim(2) == reference.image.dim(3),
            ErrorKind::shape, "save_prediction: label shape ", shape_str(label.shape()),
            " does not match the reference volume (", reference.image.dim(1), ",",
            reference.image.dim(2), ",", reference.image.dim(3), ")");
    for (std::int64_t i = 0; i < label.numel(); ++i) {
        const int v = label[i];
        require(v == 0 || v == 1 || v == 2 || v == 4, ErrorKind::validation,
                "save_prediction: class value ", v, " outside {0,1,2,4}");
    }
    write_nifti(path, label, reference.spacing, reference.affine);
}

}  // namespace ounet::io
