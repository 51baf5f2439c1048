#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>
#include <filesystem>

#include <zlib.h>

namespace nfldm {

// ---------------------------------------------------------------------------
// NFT tensor container.
//
// File layout, all integers little-endian:
//   magic "NFLT" | u32 version (1) | u64 record count
//   per record: u32 name_len | name bytes | u32 dtype (1 = f32) |
//               u32 rank | u64 dims[rank] | payload (row-major f32)
// ---------------------------------------------------------------------------

struct NftTensor {
    std::string name;
    std::vector<uint64_t> dims;
    std::vector<float> data;

    uint64_t numel() const {
        uint64_t n = 1;
        for (uint64_t d : dims) n *= d;
        return n;
    }
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    for (size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw std::runtime_error("nft: truncated file");
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    off += sizeof(T);
    return static_cast<T>(v);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& buf) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("write failed for " + path);
}

} // namespace detail

inline void nft_write(const std::string& path, const std::vector<NftTensor>& tensors) {
    std::string buf;
    buf += "NFLT";
    detail::put_le<uint32_t>(buf, 1u);
    detail::put_le<uint64_t>(buf, tensors.size());
    for (const auto& t : tensors) {
        if (t.data.size() != t.numel())
            throw std::runtime_error("nft: dims/data mismatch for " + t.name);
        detail::put_le<uint32_t>(buf, static_cast<uint32_t>(t.name.size()));
        buf += t.name;
        detail::put_le<uint32_t>(buf, 1u); // dtype f32
        detail::put_le<uint32_t>(buf, static_cast<uint32_t>(t.dims.size()));
        for (uint64_t d : t.dims) detail::put_le<uint64_t>(buf, d);
        for (float v : t.data) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            detail::put_le<uint32_t>(buf, bits);
        }
    }
    detail::write_file(path, buf);
}

inline std::vector<NftTensor> nft_read(const std::string& path) {
    std::string buf = detail::read_file(path);
    size_t off = 0;
    if (buf.size() < 4 || buf.compare(0, 4, "NFLT") != 0)
        throw std::runtime_error("nft: bad magic in " + path);
    off = 4;
    uint32_t version = detail::get_le<uint32_t>(buf, off);
    if (version != 1) throw std::runtime_error("nft: unsupported version");
    uint64_t count = detail::get_le<uint64_t>(buf, off);
    std::vector<NftTensor> out;
    out.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        NftTensor t;
        uint32_t name_len = detail::get_le<uint32_t>(buf, off);
        if (off + name_len > buf.size()) throw std::runtime_error("nft: truncated name");
        t.name.assign(buf, off, name_len);
        off += name_len;
        uint32_t dtype = detail::get_le<uint32_t>(buf, off);
        if (dtype != 1) throw std::runtime_error("nft: unsupported dtype");
        uint32_t rank = detail::get_le<uint32_t>(buf, off);
        t.dims.resize(rank);
        for (uint32_t r = 0; r < rank; ++r) t.dims[r] = detail::get_le<uint64_t>(buf, off);
        uint64_t n = t.numel();
        t.data.resize(n);
        for (uint64_t k = 0; k < n; ++k) {
            uint32_t bits = detail::get_le<uint32_t>(buf, off);
            std::memcpy(&t.data[k], &bits, 4);
        }
        out.push_back(std::move(t));
    }
    return out;
}

inline void nft_write_one(const std::string& path, const std::string& name,
                          std::vector<uint64_t> dims, std::vector<float> data) {
    NftTensor t{name, std::move(dims), std::move(data)};
    nft_write(path, {t});
}

inline NftTensor nft_read_one(const std::string& path) {
    auto v = nft_read(path);
    if (v.size() != 1) throw std::runtime_error("nft: expected single record in " + path);
    return std::move(v[0]);
}

inline const NftTensor& nft_find(const std::vector<NftTensor>& v, const std::string& name) {
    for (const auto& t : v)
        if (t.name == name) return t;
    throw std::runtime_error("nft: missing record " + name);
}

// ---------------------------------------------------------------------------
// PNG, 8-bit gray / RGB / RGBA, no interlace. DEFLATE and CRC via zlib.
// ---------------------------------------------------------------------------

struct Image {
    int w = 0, h = 0, c = 0;
    std::vector<uint8_t> pix; // row-major, c bytes per pixel

    uint8_t& at(int y, int x, int ch) { return pix[(static_cast<size_t>(y) * w + x) * c + ch]; }
    uint8_t at(int y, int x, int ch) const { return pix[(static_cast<size_t>(y) * w + x) * c + ch]; }
};

namespace detail {

inline void png_chunk(std::string& out, const char type[4], const std::string& payload) {
    uint32_t len = static_cast<uint32_t>(payload.size());
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    size_t start = out.size();
    out.append(type, 4);
    out += payload;
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(out.data() + start), static_cast<uInt>(out.size() - start));
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((crc >> (8 * i)) & 0xff));
}

inline uint32_t be32(const std::string& buf, size_t off) {
    return (static_cast<uint32_t>(static_cast<unsigned char>(buf[off])) << 24) |
           (static_cast<uint32_t>(static_cast<unsigned char>(buf[off + 1])) << 16) |
           (static_cast<uint32_t>(static_cast<unsigned char>(buf[off + 2])) << 8) |
           static_cast<uint32_t>(static_cast<unsigned char>(buf[off + 3]));
}

inline int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace detail

inline void png_write(const std::string& path, const Image& img) {
    if (img.w <= 0 || img.h <= 0 || (img.c != 1 && img.c != 3 && img.c != 4))
        throw std::runtime_error("png_write: unsupported image");
    if (img.pix.size() != static_cast<size_t>(img.w) * img.h * img.c)
        throw std::runtime_error("png_write: pixel buffer size mismatch");

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    for (int i = 3; i >= 0; --i) ihdr.push_back(static_cast<char>((img.w >> (8 * i)) & 0xff));
    for (int i = 3; i >= 0; --i) ihdr.push_back(static_cast<char>((img.h >> (8 * i)) & 0xff));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(img.c == 1 ? 0 : (img.c == 3 ? 2 : 6));
    ihdr.push_back(0); ihdr.push_back(0); ihdr.push_back(0);
    detail::png_chunk(out, "IHDR", ihdr);

    size_t stride = static_cast<size_t>(img.w) * img.c;
    std::string raw;
    raw.reserve((stride + 1) * img.h);
    for (int y = 0; y < img.h; ++y) {
        raw.push_back(0); // filter: none
        raw.append(reinterpret_cast<const char*>(img.pix.data() + y * stride), stride);
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::string comp(comp_len, '\0');
    if (compress2(reinterpret_cast<Bytef*>(comp.data()), &comp_len,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png_write: deflate failed");
    comp.resize(comp_len);
    detail::png_chunk(out, "IDAT", comp);
    detail::png_chunk(out, "IEND", "");
    detail::write_file(path, out);
}

inline Image png_read(const std::string& path) {
    std::string buf = detail::read_file(path);
    if (buf.size() < 8 || buf.compare(0, 8, "\x89PNG\r\n\x1a\n") != 0)
        throw std::runtime_error("png_read: bad signature in " + path);
    size_t off = 8;
    Image img;
    int bit_depth = 0, color_type = 0;
    std::string idat;
    while (off + 8 <= buf.size()) {
        uint32_t len = detail::be32(buf, off);
        std::string type = buf.substr(off + 4, 4);
        size_t payload = off + 8;
        if (payload + len + 4 > buf.size()) throw std::runtime_error("png_read: truncated chunk");
        if (type == "IHDR") {
            img.w = static_cast<int>(detail::be32(buf, payload));
            img.h = static_cast<int>(detail::be32(buf, payload + 4));
            bit_depth = static_cast<unsigned char>(buf[payload + 8]);
            color_type = static_cast<unsigned char>(buf[payload + 9]);
            if (static_cast<unsigned char>(buf[payload + 12]) != 0)
                throw std::runtime_error("png_read: interlace unsupported");
        } else if (type == "IDAT") {
            idat.append(buf, payload, len);
        } else if (type == "IEND") {
            break;
        }
        off = payload + len + 4;
    }
    if (bit_depth != 8) throw std::runtime_error("png_read: only 8-bit supported");
    switch (color_type) {
        case 0: img.c = 1; break;
        case 2: img.c = 3; break;
        case 6: img.c = 4; break;
        default: throw std::runtime_error("png_read: unsupported color type");
    }
    size_t stride = static_cast<size_t>(img.w) * img.c;
    uLongf raw_len = static_cast<uLongf>((stride + 1) * img.h);
    std::string raw(raw_len, '\0');
    if (uncompress(reinterpret_cast<Bytef*>(raw.data()), &raw_len,
                   reinterpret_cast<const Bytef*>(idat.data()), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != (stride + 1) * static_cast<size_t>(img.h))
        throw std::runtime_error("png_read: inflate failed");

    img.pix.assign(stride * img.h, 0);
    int bpp = img.c;
    for (int y = 0; y < img.h; ++y) {
        int filter = static_cast<unsigned char>(raw[y * (stride + 1)]);
        const unsigned char* src = reinterpret_cast<const unsigned char*>(raw.data() + y * (stride + 1) + 1);
        uint8_t* cur = img.pix.data() + y * stride;
        const uint8_t* prev = y > 0 ? img.pix.data() + (y - 1) * stride : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= static_cast<size_t>(bpp) ? cur[i - bpp] : 0;
            int b = prev ? prev[i] : 0;
            int cc = (prev && i >= static_cast<size_t>(bpp)) ? prev[i - bpp] : 0;
            int x = src[i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += detail::paeth(a, b, cc); break;
                default: throw std::runtime_error("png_read: bad filter");
            }
            cur[i] = static_cast<uint8_t>(x & 0xff);
        }
    }
    return img;
}

// float [0,1] planar [C,H,W] <-> 8-bit interleaved image
inline Image to_image(const std::vector<float>& chw, int c, int h, int w) {
    Image img;
    img.w = w; img.h = h; img.c = c;
    img.pix.resize(static_cast<size_t>(w) * h * c);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float v = chw[(static_cast<size_t>(ch) * h + y) * w + x];
                v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
                img.at(y, x, ch) = static_cast<uint8_t>(std::lround(v * 255.0f));
            }
    return img;
}

inline std::vector<float> to_chw(const Image& img) {
    std::vector<float> out(static_cast<size_t>(img.c) * img.h * img.w);
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                out[(static_cast<size_t>(ch) * img.h + y) * img.w + x] = img.at(y, x, ch) / 255.0f;
    return out;
}

} // namespace nfldm
