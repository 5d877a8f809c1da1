#pragma once

#include <png.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "p2ilf/geometry.hpp"
#include "p2ilf/image.hpp"
#include "p2ilf/mesh.hpp"

namespace p2ilf {

// Label-map palette indices used in PNG files.
enum : uint8_t {
    kPaletteBackground = 0,
    kPaletteRidge = 1,
    kPaletteLigament = 2,
    kPaletteSilhouette = 3,
    kPaletteRidgeLigament = 4,
};

inline uint8_t palette_index_from_bits(uint8_t bits) {
    const bool ridge = bits & class_bit(LandmarkClass::Ridge);
    const bool liga = bits & class_bit(LandmarkClass::Ligament);
    const bool sil = bits & class_bit(LandmarkClass::Silhouette);
    if (ridge && liga) {
        return kPaletteRidgeLigament;
    }
    if (ridge) {
        return kPaletteRidge;
    }
    if (liga) {
        return kPaletteLigament;
    }
    if (sil) {
        return kPaletteSilhouette;
    }
    return kPaletteBackground;
}

inline uint8_t bits_from_palette_index(uint8_t idx) {
    switch (idx) {
        case kPaletteRidge:
            return class_bit(LandmarkClass::Ridge);
        case kPaletteLigament:
            return class_bit(LandmarkClass::Ligament);
        case kPaletteSilhouette:
            return class_bit(LandmarkClass::Silhouette);
        case kPaletteRidgeLigament:
            return class_bit(LandmarkClass::Ridge) | class_bit(LandmarkClass::Ligament);
        default:
            return 0;
    }
}

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Fig.-style colors: ridge red, ligament blue, silhouette yellow.
inline const png_color* label_palette() {
    static const png_color pal[5] = {
        {0, 0, 0}, {255, 0, 0}, {0, 0, 255}, {255, 255, 0}, {255, 0, 255}};
    return pal;
}

inline void write_png_rows(const std::string& path, int width, int height, int color_type,
                           const std::vector<const uint8_t*>& rows, bool paletted) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) {
        throw DataError("cannot open for writing: " + path);
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) {
        throw DataError("libpng init failed");
    }
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng write error: " + path);
    }
    png_init_io(png, fp.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    if (paletted) {
        png_set_PLTE(png, info, const_cast<png_color*>(label_palette()), 5);
    }
    png_write_info(png, info);
    for (const uint8_t* row : rows) {
        png_write_row(png, const_cast<png_bytep>(row));
    }
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
}

struct DecodedPng {
    int width = 0;
    int height = 0;
    int channels = 0;          // 1 = gray or palette index, 3 = rgb
    bool paletted = false;
    std::vector<uint8_t> data; // row-major, channels interleaved
};

inline DecodedPng read_png(const std::string& path, bool keep_palette_indices,
                           bool expand_to_rgb) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) {
        throw MissingAsset("cannot open PNG file: " + path);
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) {
        throw DataError("libpng init failed");
    }
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("libpng init failed");
    }
    DecodedPng out;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError("invalid PNG file: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const png_byte color_type = png_get_color_type(png, info);
    const png_byte bit_depth = png_get_bit_depth(png, info);

    if (bit_depth == 16) {
        png_set_strip_16(png);
    }
    if (color_type == PNG_COLOR_TYPE_PALETTE) {
        if (keep_palette_indices && !expand_to_rgb) {
            out.paletted = true;
            if (bit_depth < 8) {
                png_set_packing(png);
            }
        } else {
            png_set_palette_to_rgb(png);
        }
    }
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    if (png_get_valid(png, info, PNG_INFO_tRNS)) {
        png_set_tRNS_to_alpha(png);
    }
    png_set_strip_alpha(png);
    if (expand_to_rgb) {
        png_set_gray_to_rgb(png);
    } else if (!out.paletted && (color_type == PNG_COLOR_TYPE_RGB ||
                                 color_type == PNG_COLOR_TYPE_RGB_ALPHA)) {
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    png_read_update_info(png, info);

    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = static_cast<int>(png_get_channels(png, info));
    out.data.resize(static_cast<size_t>(out.width) * out.height * out.channels);
    row_ptrs.resize(static_cast<size_t>(out.height));
    for (int y = 0; y < out.height; ++y) {
        row_ptrs[static_cast<size_t>(y)] =
            out.data.data() + static_cast<size_t>(y) * out.width * out.channels;
    }
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

} // namespace detail

/// Writes a soft mask as 8-bit grayscale, 0..255 over [0,1].
inline void save_mask_png(const SoftMask& mask, const std::string& path) {
    std::vector<uint8_t> bytes(mask.size());
    for (size_t i = 0; i < mask.data.size(); ++i) {
        const double v = std::clamp(mask.data[i], 0.0, 1.0);
        bytes[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    std::vector<const uint8_t*> rows(static_cast<size_t>(mask.height));
    for (int y = 0; y < mask.height; ++y) {
        rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * mask.width;
    }
    detail::write_png_rows(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, rows, false);
}

inline SoftMask load_mask_png(const std::string& path) {
    detail::DecodedPng png = detail::read_png(path, false, false);
    SoftMask mask(png.width, png.height);
    for (size_t i = 0; i < mask.data.size(); ++i) {
        mask.data[i] = png.data[i] / 255.0;
    }
    return mask;
}

/// Writes a landmark map as a paletted PNG with indices
/// {0 background, 1 ridge, 2 ligament, 3 silhouette, 4 ridge+ligament}.
inline void save_landmark_map_png(const LandmarkMap2D& map, const std::string& path) {
    std::vector<uint8_t> bytes(map.mask.size());
    for (size_t i = 0; i < map.mask.size(); ++i) {
        bytes[i] = palette_index_from_bits(map.mask[i]);
    }
    std::vector<const uint8_t*> rows(static_cast<size_t>(map.height));
    for (int y = 0; y < map.height; ++y) {
        rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * map.width;
    }
    detail::write_png_rows(path, map.width, map.height, PNG_COLOR_TYPE_PALETTE, rows, true);
}

inline LandmarkMap2D load_landmark_map_png(const std::string& path) {
    detail::DecodedPng png = detail::read_png(path, true, false);
    LandmarkMap2D map(png.width, png.height);
    for (size_t i = 0; i < map.mask.size(); ++i) {
        const uint8_t idx = png.data[i];
        if (idx > kPaletteRidgeLigament) {
            throw ParseError("label map " + path + ": palette index " + std::to_string(idx) +
                             " out of range");
        }
        map.mask[i] = bits_from_palette_index(idx);
    }
    return map;
}

inline void save_rgb_png(const Image<Rgb8>& img, const std::string& path) {
    std::vector<uint8_t> bytes(img.size() * 3);
    for (size_t i = 0; i < img.data.size(); ++i) {
        bytes[i * 3 + 0] = img.data[i].r;
        bytes[i * 3 + 1] = img.data[i].g;
        bytes[i * 3 + 2] = img.data[i].b;
    }
    std::vector<const uint8_t*> rows(static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y) {
        rows[static_cast<size_t>(y)] = bytes.data() + static_cast<size_t>(y) * img.width * 3;
    }
    detail::write_png_rows(path, img.width, img.height, PNG_COLOR_TYPE_RGB, rows, false);
}

inline Image<Rgb8> load_rgb_png(const std::string& path) {
    detail::DecodedPng png = detail::read_png(path, false, true);
    Image<Rgb8> img(png.width, png.height);
    for (size_t i = 0; i < img.data.size(); ++i) {
        img.data[i] = {png.data[i * 3], png.data[i * 3 + 1], png.data[i * 3 + 2]};
    }
    return img;
}

// ---- JSON files ----

using Json = nlohmann::json;

inline Json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingAsset("cannot open JSON file: " + path);
    }
    Json j;
    try {
        in >> j;
    } catch (const Json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return j;
}

inline void save_json_file(const Json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write JSON file: " + path);
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw DataError("failed writing JSON file: " + path);
    }
}

inline CameraIntrinsics camera_from_json(const Json& j, const std::string& what) {
    CameraIntrinsics intr;
    try {
        intr.fx = j.at("fx").get<double>();
        intr.fy = j.at("fy").get<double>();
        intr.cx = j.at("cx").get<double>();
        intr.cy = j.at("cy").get<double>();
        intr.width = j.at("width").get<int>();
        intr.height = j.at("height").get<int>();
        intr.k1 = j.value("k1", 0.0);
        intr.k2 = j.value("k2", 0.0);
        intr.k3 = j.value("k3", 0.0);
        intr.p1 = j.value("p1", 0.0);
        intr.p2 = j.value("p2", 0.0);
    } catch (const Json::exception& e) {
        throw ParseError(what + ": " + e.what());
    }
    if (intr.fx <= 0 || intr.fy <= 0 || intr.width <= 0 || intr.height <= 0) {
        throw ParseError(what + ": focal lengths and image size must be positive");
    }
    return intr;
}

inline CameraIntrinsics load_camera_json(const std::string& path) {
    return camera_from_json(load_json_file(path), path);
}

inline Json camera_to_json(const CameraIntrinsics& intr) {
    return Json{{"fx", intr.fx}, {"fy", intr.fy}, {"cx", intr.cx},         {"cy", intr.cy},
                {"k1", intr.k1}, {"k2", intr.k2}, {"k3", intr.k3},         {"p1", intr.p1},
                {"p2", intr.p2}, {"width", intr.width}, {"height", intr.height}};
}

inline void save_camera_json(const CameraIntrinsics& intr, const std::string& path) {
    save_json_file(camera_to_json(intr), path);
}

inline RigidPose pose_from_json(const Json& j, const std::string& what) {
    RigidPose pose;
    try {
        const auto r = j.at("R").get<std::vector<double>>();
        const auto t = j.at("t").get<std::vector<double>>();
        if (r.size() != 9 || t.size() != 3) {
            throw ParseError(what + ": pose must have 9 R entries and 3 t entries");
        }
        for (int i = 0; i < 3; ++i) {
            for (int k = 0; k < 3; ++k) {
                pose.R(i, k) = r[static_cast<size_t>(i * 3 + k)];
            }
            pose.t[i] = t[static_cast<size_t>(i)];
        }
    } catch (const Json::exception& e) {
        throw ParseError(what + ": " + e.what());
    }
    if (!pose.is_valid(1e-6)) {
        throw ParseError(what + ": R is not a rotation matrix");
    }
    return pose;
}

inline RigidPose load_pose_json(const std::string& path) {
    return pose_from_json(load_json_file(path), path);
}

inline Json pose_to_json(const RigidPose& pose) {
    std::vector<double> r(9);
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 3; ++k) {
            r[static_cast<size_t>(i * 3 + k)] = pose.R(i, k);
        }
    }
    return Json{{"R", r}, {"t", {pose.t.x(), pose.t.y(), pose.t.z()}}};
}

inline void save_pose_json(const RigidPose& pose, const std::string& path) {
    save_json_file(pose_to_json(pose), path);
}

/// 3D landmark file: {"ridge": [...], "ligament": [...]} with 0-based vertex
/// indices, plus an optional "anterior" model-frame direction (default +z).
inline LandmarkSet3D landmarks3d_from_json(const std::string& path, Vec3* anterior = nullptr) {
    const Json j = load_json_file(path);
    LandmarkSet3D lms;
    try {
        lms.ridge = j.value("ridge", std::vector<int>{});
        lms.ligament = j.value("ligament", std::vector<int>{});
        if (anterior && j.contains("anterior")) {
            const auto a = j.at("anterior").get<std::vector<double>>();
            if (a.size() != 3) {
                throw ParseError(path + ": anterior must have 3 components");
            }
            *anterior = Vec3(a[0], a[1], a[2]).normalized();
        }
    } catch (const Json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    lms.normalize();
    return lms;
}

inline void load_landmarks3d_json(const std::string& path, LabelledMesh& mesh) {
    LandmarkSet3D lms = landmarks3d_from_json(path, &mesh.anterior);
    try {
        lms.validate(mesh.vertices.size(), path);
    } catch (const IndexMismatch& e) {
        throw ParseError(e.what());
    }
    mesh.labels = lms;
}

inline void save_landmarks3d_json(const LabelledMesh& mesh, const std::string& path) {
    Json j{{"ridge", mesh.labels.ridge},
           {"ligament", mesh.labels.ligament},
           {"anterior", {mesh.anterior.x(), mesh.anterior.y(), mesh.anterior.z()}}};
    save_json_file(j, path);
}

} // namespace p2ilf
