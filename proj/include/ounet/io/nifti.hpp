#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <zlib.h>

#include "ounet/core/error.hpp"
#include "ounet/core/tensor.hpp"

namespace ounet::io {

using Affine = std::array<std::array<double, 4>, 4>;
using Spacing = std::array<double, 3>;

inline Affine identity_affine() {
    Affine a{};
    for (int i = 0; i < 4; ++i) a[i][i] = 1.0;
    return a;
}

// NIfTI-1 header, 348 bytes, little-endian on disk.
struct Nifti1Header {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code;
    std::int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must pack to 348 bytes");

enum NiftiDatatype : std::int16_t {
    kNiftiUint8 = 2,
    kNiftiInt16 = 4,
    kNiftiInt32 = 8,
    kNiftiFloat32 = 16,
    kNiftiFloat64 = 64,
};

/// A loaded volume: float32 voxels in (C,H,W,D) order with D contiguous
/// (transposed from the file's x-fastest layout), plus spatial metadata.
struct NiftiImage {
    Tensor<float> data;  // [H,W,D] or [C,H,W,D] when the file has a 4th dim
    Spacing spacing{1.0, 1.0, 1.0};
    Affine affine = identity_affine();
    std::int16_t datatype_on_disk = kNiftiFloat32;
};

namespace niftidetail {

class GzFile {
public:
    GzFile(const std::filesystem::path& path, const char* mode) {
        f_ = gzopen(path.string().c_str(), mode);
        require(f_ != nullptr, ErrorKind::io, "cannot open ", path.string());
    }
    ~GzFile() {
        if (f_) gzclose(f_);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    void read_exact(void* buf, std::size_t n, const std::filesystem::path& path) {
        const int got = gzread(f_, buf, static_cast<unsigned>(n));
        require(got == static_cast<int>(n), ErrorKind::io, "short read (", got, " of ", n,
                " bytes) from ", path.string());
    }
    void write_exact(const void* buf, std::size_t n, const std::filesystem::path& path) {
        const int put = gzwrite(f_, buf, static_cast<unsigned>(n));
        require(put == static_cast<int>(n), ErrorKind::io, "short write to ", path.string());
    }

private:
    gzFile f_ = nullptr;
};

inline std::int64_t dtype_size(std::int16_t dt) {
    switch (dt) {
        case kNiftiUint8: return 1;
        case kNiftiInt16: return 2;
        case kNiftiInt32: return 4;
        case kNiftiFloat32: return 4;
        case kNiftiFloat64: return 8;
        default: return 0;
    }
}

inline float decode_voxel(const unsigned char* p, std::int16_t dt) {
    switch (dt) {
        case kNiftiUint8: return static_cast<float>(*p);
        case kNiftiInt16: {
            std::int16_t v;
            std::memcpy(&v, p, 2);
            return static_cast<float>(v);
        }
        case kNiftiInt32: {
            std::int32_t v;
            std::memcpy(&v, p, 4);
            return static_cast<float>(v);
        }
        case kNiftiFloat32: {
            float v;
            std::memcpy(&v, p, 4);
            return v;
        }
        case kNiftiFloat64: {
            double v;
            std::memcpy(&v, p, 8);
            return static_cast<float>(v);
        }
        default: return 0.0f;
    }
}

}  // namespace niftidetail

/// Reads a 3-D (or 4-D, channel-last on disk) NIfTI-1 volume, converting
/// voxels to float32 and applying scl_slope/scl_inter when set. Handles
/// both .nii and .nii.gz transparently.
inline NiftiImage read_nifti(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), ErrorKind::io, "no such file: ", path.string());
    niftidetail::GzFile f(path, "rb");
    Nifti1Header h{};
    f.read_exact(&h, sizeof(h), path);
    if (h.sizeof_hdr != 348) {
        // A byte-swapped header reads as a huge value; this build targets
        // little-endian data only.
        raise(ErrorKind::io, "unsupported NIfTI header (sizeof_hdr=", h.sizeof_hdr, ") in ",
              path.string(), h.sizeof_hdr == 1543569408 ? " (big-endian file)" : "");
    }
    require(std::memcmp(h.magic, "n+1", 3) == 0, ErrorKind::io,
            "not a single-file NIfTI-1 (.nii) volume: ", path.string());
    const int ndim = h.dim[0];
    require(ndim == 3 || ndim == 4, ErrorKind::io, "expected 3-D or 4-D NIfTI, got dim[0]=", ndim,
            " in ", path.string());
    const std::int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
    const std::int64_t nc = ndim == 4 ? std::max<std::int64_t>(1, h.dim[4]) : 1;
    require(nx >= 1 && ny >= 1 && nz >= 1, ErrorKind::io, "degenerate dims in ", path.string());
    const std::int64_t vsize = niftidetail::dtype_size(h.datatype);
    require(vsize > 0, ErrorKind::io, "unsupported NIfTI datatype ", h.datatype, " in ",
            path.string());

    // Skip any extension bytes between the header and the voxel data.
    const std::int64_t offset = static_cast<std::int64_t>(h.vox_offset);
    require(offset >= 348, ErrorKind::io, "bad vox_offset in ", path.string());
    std::vector<char> skip(static_cast<std::size_t>(offset - 348));
    if (!skip.empty()) f.read_exact(skip.data(), skip.size(), path);

    const std::int64_t nvox = nx * ny * nz * nc;
    std::vector<unsigned char> raw(static_cast<std::size_t>(nvox * vsize));
    f.read_exact(raw.data(), raw.size(), path);

    const bool scale = h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);

    NiftiImage img;
    img.datatype_on_disk = h.datatype;
    img.spacing = {h.pixdim[1], h.pixdim[2], h.pixdim[3]};
    if (h.sform_code > 0) {
        for (int j = 0; j < 4; ++j) {
            img.affine[0][static_cast<std::size_t>(j)] = h.srow_x[j];
            img.affine[1][static_cast<std::size_t>(j)] = h.srow_y[j];
            img.affine[2][static_cast<std::size_t>(j)] = h.srow_z[j];
        }
        img.affine[3] = {0.0, 0.0, 0.0, 1.0};
    } else {
        img.affine = identity_affine();
        for (int a = 0; a < 3; ++a)
            img.affine[static_cast<std::size_t>(a)][static_cast<std::size_t>(a)] =
                h.pixdim[a + 1] != 0.0f ? h.pixdim[a + 1] : 1.0;
    }

    // File layout is x-fastest: raw[x + nx*(y + ny*(z + nz*c))].
    img.data = Tensor<float>(nc == 1 ? Shape{nx, ny, nz} : Shape{nc, nx, ny, nz});
    float* out = img.data.data();
    for (std::int64_t c = 0; c < nc; ++c)
        for (std::int64_t z = 0; z < nz; ++z)
            for (std::int64_t y = 0; y < ny; ++y) {
                const unsigned char* row = raw.data() + vsize * (nx * (y + ny * (z + nz * c)));
                for (std::int64_t x = 0; x < nx; ++x) {
                    float v = niftidetail::decode_voxel(row + x * vsize, h.datatype);
                    if (scale) v = v * h.scl_slope + h.scl_inter;
                    out[((c * nx + x) * ny + y) * nz + z] = v;
                }
            }
    return img;
}

namespace niftidetail {

inline Nifti1Header make_header(const Shape& spatial, std::int64_t channels, std::int16_t dtype,
                                const Spacing& spacing, const Affine& affine) {
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = channels > 1 ? 4 : 3;
    h.dim[1] = static_cast<std::int16_t>(spatial[0]);
    h.dim[2] = static_cast<std::int16_t>(spatial[1]);
    h.dim[3] = static_cast<std::int16_t>(spatial[2]);
    h.dim[4] = static_cast<std::int16_t>(channels > 1 ? channels : 1);
    for (int i = 5; i < 8; ++i) h.dim[i] = 1;
    h.datatype = dtype;
    h.bitpix = static_cast<std::int16_t>(8 * dtype_size(dtype));
    h.pixdim[0] = 1.0f;
    for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(spacing[static_cast<std::size_t>(a)]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.xyzt_units = 2;  // millimetres
    h.qform_code = 0;
    h.sform_code = 1;
    for (int j = 0; j < 4; ++j) {
        h.srow_x[j] = static_cast<float>(affine[0][static_cast<std::size_t>(j)]);
        h.srow_y[j] = static_cast<float>(affine[1][static_cast<std::size_t>(j)]);
        h.srow_z[j] = static_cast<float>(affine[2][static_cast<std::size_t>(j)]);
    }
    std::memcpy(h.magic, "n+1", 4);
    return h;
}

template <typename T, typename Encode>
void write_nifti_impl(const std::filesystem::path& path, const Tensor<T>& vol, std::int16_t dtype,
                      const Spacing& spacing, const Affine& affine, Encode encode) {
    require(vol.rank() == 3 || vol.rank() == 4, ErrorKind::shape,
            "write_nifti: expected [H,W,D] or [C,H,W,D], got ", shape_str(vol.shape()));
    const bool channeled = vol.rank() == 4;
    const std::int64_t nc = channeled ? vol.dim(0) : 1;
    const Shape spatial = channeled ? Shape{vol.dim(1), vol.dim(2), vol.dim(3)}
                                    : Shape{vol.dim(0), vol.dim(1), vol.dim(2)};
    for (auto d : spatial)
        require(d >= 1 && d <= 32767, ErrorKind::shape, "write_nifti: dim out of int16 range: ", d);

    Nifti1Header h = make_header(spatial, nc, dtype, spacing, affine);
    const std::int64_t nx = spatial[0], ny = spatial[1], nz = spatial[2];
    const std::int64_t vsize = dtype_size(dtype);
    std::vector<unsigned char> raw(static_cast<std::size_t>(nx * ny * nz * nc * vsize));
    const T* in = vol.data();
    for (std::int64_t c = 0; c < nc; ++c)
        for (std::int64_t z = 0; z < nz; ++z)
            for (std::int64_t y = 0; y < ny; ++y) {
                unsigned char* row = raw.data() + vsize * (nx * (y + ny * (z + nz * c)));
                for (std::int64_t x = 0; x < nx; ++x)
                    encode(in[((c * nx + x) * ny + y) * nz + z], row + x * vsize);
            }

    const bool gz = path.extension() == ".gz";
    GzFile f(path, gz ? "wb" : "wT");  // "T" writes uncompressed through zlib
    f.write_exact(&h, sizeof(h), path);
    const char pad[4] = {0, 0, 0, 0};
    f.write_exact(pad, 4, path);
    f.write_exact(raw.data(), raw.size(), path);
}

}  // namespace niftidetail

inline void write_nifti(const std::filesystem::path& path, const Tensor<float>& vol,
                        const Spacing& spacing, const Affine& affine) {
    niftidetail::write_nifti_impl(path, vol, kNiftiFloat32, spacing, affine,
                                  [](float v, unsigned char* p) { std::memcpy(p, &v, 4); });
}

inline void write_nifti(const std::filesystem::path& path, const Tensor<std::uint8_t>& vol,
                        const Spacing& spacing, const Affine& affine) {
    niftidetail::write_nifti_impl(path, vol, kNiftiUint8, spacing, affine,
                                  [](std::uint8_t v, unsigned char* p) { *p = v; });
}

}  // namespace ounet::io
