#include "mufasa/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mufasa {

ImageD to_image_d(const ImageU8& img) {
  ImageD out{img.width, img.height, img.channels, {}};
  out.values.resize(img.pixels.size());
  for (size_t i = 0; i < img.pixels.size(); ++i) out.values[i] = img.pixels[i] / 255.0;
  return out;
}

ImageU8 to_image_u8(const ImageD& img) {
  ImageU8 out{img.width, img.height, img.channels, {}};
  out.pixels.resize(img.values.size());
  for (size_t i = 0; i < img.values.size(); ++i) {
    const double v = std::clamp(img.values[i], 0.0, 1.0);
    out.pixels[i] = std::uint8_t(std::lround(v * 255.0));
  }
  return out;
}

ImageD resize_bilinear(const ImageD& img, int out_w, int out_h) {
  if (out_w == img.width && out_h == img.height) return img;
  ImageD out{out_w, out_h, img.channels, {}};
  out.values.resize(size_t(out_w * out_h * img.channels));
  const double sx = double(img.width) / out_w;
  const double sy = double(img.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    // half-pixel-center convention
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
    const int y0 = int(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
      const int x0 = int(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = (1.0 - wx) * img.at(x0, y0, c) + wx * img.at(x1, y0, c);
        const double bot = (1.0 - wx) * img.at(x0, y1, c) + wx * img.at(x1, y1, c);
        out.at(x, y, c) = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

LabelImage resize_nearest(const LabelImage& img, int out_w, int out_h) {
  if (out_w == img.width && out_h == img.height) return img;
  LabelImage out{out_w, out_h, {}};
  out.ids.resize(size_t(out_w * out_h));
  const double sx = double(img.width) / out_w;
  const double sy = double(img.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const int iy = std::min(int((y + 0.5) * sy), img.height - 1);
    for (int x = 0; x < out_w; ++x) {
      const int ix = std::min(int((x + 0.5) * sx), img.width - 1);
      out.at(x, y) = img.at(ix, iy);
    }
  }
  return out;
}

ImageD crop(const ImageD& img, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || x0 + w > img.width || y0 + h > img.height)
    throw ConfigError("crop window outside image");
  ImageD out{w, h, img.channels, {}};
  out.values.resize(size_t(w * h * img.channels));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

LabelImage crop(const LabelImage& img, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || x0 + w > img.width || y0 + h > img.height)
    throw ConfigError("crop window outside image");
  LabelImage out{w, h, {}};
  out.ids.resize(size_t(w * h));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = img.at(x0 + x, y0 + y);
  return out;
}

ImageD hflip(const ImageD& img) {
  ImageD out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

LabelImage hflip(const LabelImage& img) {
  LabelImage out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) out.at(x, y) = img.at(img.width - 1 - x, y);
  return out;
}

// ---------------------------------------------------------------------------
// PNG encoding
// ---------------------------------------------------------------------------

namespace {

std::uint32_t crc32_update(std::uint32_t crc, const std::uint8_t* data, size_t n) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
      t[i] = c;
    }
    return t;
  }();
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return crc;
}

void put_u32_be(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(std::uint8_t(x >> 24));
  v.push_back(std::uint8_t(x >> 16));
  v.push_back(std::uint8_t(x >> 8));
  v.push_back(std::uint8_t(x));
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
  put_u32_be(out, std::uint32_t(payload.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const std::uint32_t crc =
      crc32_update(0xFFFFFFFFu, out.data() + crc_start, out.size() - crc_start) ^ 0xFFFFFFFFu;
  put_u32_be(out, crc);
}

std::vector<std::uint8_t> zlib_stored(const std::vector<std::uint8_t>& raw) {
  std::vector<std::uint8_t> z;
  z.reserve(raw.size() + raw.size() / 65535 * 5 + 16);
  z.push_back(0x78);
  z.push_back(0x01);
  size_t pos = 0;
  do {
    const size_t len = std::min<size_t>(65535, raw.size() - pos);
    const bool final = pos + len == raw.size();
    z.push_back(final ? 0x01 : 0x00);
    z.push_back(std::uint8_t(len & 0xFF));
    z.push_back(std::uint8_t(len >> 8));
    z.push_back(std::uint8_t(~len & 0xFF));
    z.push_back(std::uint8_t((~len >> 8) & 0xFF));
    z.insert(z.end(), raw.begin() + std::ptrdiff_t(pos), raw.begin() + std::ptrdiff_t(pos + len));
    pos += len;
  } while (pos < raw.size());
  std::uint32_t a = 1, b = 0;
  for (std::uint8_t byte : raw) {
    a = (a + byte) % 65521;
    b = (b + a) % 65521;
  }
  put_u32_be(z, (b << 16) | a);
  return z;
}

void write_png(const std::string& path, int width, int height, int bit_depth, int color_type,
               const std::vector<std::uint8_t>& scanline_data,
               const std::vector<std::array<std::uint8_t, 3>>* palette) {
  std::vector<std::uint8_t> out;
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  out.insert(out.end(), sig, sig + 8);

  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, std::uint32_t(width));
  put_u32_be(ihdr, std::uint32_t(height));
  ihdr.push_back(std::uint8_t(bit_depth));
  ihdr.push_back(std::uint8_t(color_type));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  append_chunk(out, "IHDR", ihdr);

  if (palette) {
    std::vector<std::uint8_t> plte;
    for (const auto& c : *palette) {
      plte.push_back(c[0]);
      plte.push_back(c[1]);
      plte.push_back(c[2]);
    }
    append_chunk(out, "PLTE", plte);
  }

  append_chunk(out, "IDAT", zlib_stored(scanline_data));
  append_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write PNG: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw IoError("PNG write failed: " + path);
}

}  // namespace

void write_png_rgb8(const std::string& path, const ImageU8& img) {
  if (img.channels != 3) throw ConfigError("write_png_rgb8 expects 3 channels");
  std::vector<std::uint8_t> raw;
  raw.reserve(size_t(img.height) * (size_t(img.width) * 3 + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: None
    const std::uint8_t* row = img.pixels.data() + size_t(y) * img.width * 3;
    raw.insert(raw.end(), row, row + size_t(img.width) * 3);
  }
  write_png(path, img.width, img.height, 8, 2, raw, nullptr);
}

void write_png_gray16(const std::string& path, const std::vector<std::uint16_t>& samples, int width,
                      int height) {
  if (samples.size() != size_t(width) * size_t(height))
    throw DimensionError("write_png_gray16: sample count mismatch");
  std::vector<std::uint8_t> raw;
  raw.reserve(size_t(height) * (size_t(width) * 2 + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    for (int x = 0; x < width; ++x) {
      const std::uint16_t v = samples[size_t(y * width + x)];
      raw.push_back(std::uint8_t(v >> 8));
      raw.push_back(std::uint8_t(v & 0xFF));
    }
  }
  write_png(path, width, height, 16, 0, raw, nullptr);
}

void write_png_indexed(const std::string& path, const LabelImage& labels,
                       const std::vector<std::array<std::uint8_t, 3>>& palette) {
  if (palette.empty() || palette.size() > 256) throw ConfigError("palette size must be 1..256");
  std::vector<std::uint8_t> raw;
  raw.reserve(size_t(labels.height) * (size_t(labels.width) + 1));
  for (int y = 0; y < labels.height; ++y) {
    raw.push_back(0);
    for (int x = 0; x < labels.width; ++x) {
      const std::int32_t id = labels.at(x, y);
      const int idx = id < 0 ? 0 : id;
      if (idx >= int(palette.size())) throw RangeError("label id exceeds palette size");
      raw.push_back(std::uint8_t(idx));
    }
  }
  write_png(path, labels.width, labels.height, 8, 3, raw, &palette);
}

// ---------------------------------------------------------------------------
// PNG decoding (inflate + de-filtering)
// ---------------------------------------------------------------------------

namespace {

struct BitReader {
  const std::uint8_t* data;
  size_t size;
  size_t pos = 0;
  std::uint32_t bitbuf = 0;
  int bitcnt = 0;

  int bits(int need) {
    std::uint32_t val = bitbuf;
    while (bitcnt < need) {
      if (pos >= size) throw CorruptionError("PNG: deflate stream truncated");
      val |= std::uint32_t(data[pos++]) << bitcnt;
      bitcnt += 8;
    }
    bitbuf = val >> need;
    bitcnt -= need;
    return int(val & ((1u << need) - 1));
  }

  void align_byte() {
    bitbuf = 0;
    bitcnt = 0;
  }
};

struct Huffman {
  std::array<std::uint16_t, 16> count{};
  std::vector<std::uint16_t> symbol;

  void build(const std::uint8_t* lengths, int n) {
    count.fill(0);
    for (int i = 0; i < n; ++i) count[lengths[i]]++;
    count[0] = 0;
    std::array<std::uint16_t, 16> offs{};
    for (int l = 1; l < 16; ++l) offs[size_t(l)] = std::uint16_t(offs[size_t(l - 1)] + count[size_t(l - 1)]);
    symbol.assign(size_t(n), 0);
    for (int i = 0; i < n; ++i)
      if (lengths[i] != 0) symbol[offs[lengths[i]]++] = std::uint16_t(i);
  }

  int decode(BitReader& br) const {
    int code = 0, first = 0, index = 0;
    for (int len = 1; len < 16; ++len) {
      code |= br.bits(1);
      const int cnt = count[size_t(len)];
      if (code - first < cnt) return symbol[size_t(index + (code - first))];
      index += cnt;
      first = (first + cnt) << 1;
      code <<= 1;
    }
    throw CorruptionError("PNG: invalid Huffman code");
  }
};

void inflate_block_data(BitReader& br, const Huffman& lit, const Huffman& dist,
                        std::vector<std::uint8_t>& out) {
  static const int len_base[29] = {3,  4,  5,  6,  7,  8,  9,  10, 11,  13,  15,  17,  19,  23, 27,
                                   31, 35, 43, 51, 59, 67, 83, 99, 115, 131, 163, 195, 227, 258};
  static const int len_extra[29] = {0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2,
                                    2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0};
  static const int dist_base[30] = {1,    2,    3,    4,    5,    7,     9,     13,   17,   25,
                                    33,   49,   65,   97,   129,  193,   257,   385,  513,  769,
                                    1025, 1537, 2049, 3073, 4097, 6145,  8193,  12289, 16385, 24577};
  static const int dist_extra[30] = {0, 0, 0, 0, 1, 1, 2, 2,  3,  3,  4,  4,  5,  5,  6,
                                     6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13};
  for (;;) {
    const int sym = lit.decode(br);
    if (sym < 256) {
      out.push_back(std::uint8_t(sym));
    } else if (sym == 256) {
      return;
    } else {
      const int li = sym - 257;
      if (li >= 29) throw CorruptionError("PNG: bad length symbol");
      const int length = len_base[li] + br.bits(len_extra[li]);
      const int di = dist.decode(br);
      if (di >= 30) throw CorruptionError("PNG: bad distance symbol");
      const int distance = dist_base[di] + br.bits(dist_extra[di]);
      if (size_t(distance) > out.size()) throw CorruptionError("PNG: distance too far back");
      size_t from = out.size() - size_t(distance);
      for (int i = 0; i < length; ++i) out.push_back(out[from++]);
    }
  }
}

std::vector<std::uint8_t> zlib_inflate(const std::uint8_t* data, size_t size) {
  if (size < 6) throw CorruptionError("PNG: zlib stream too short");
  if ((data[0] & 0x0F) != 8) throw FormatError("PNG: unsupported zlib method");
  BitReader br{data + 2, size - 6};  // skip 2-byte header, leave 4-byte adler
  std::vector<std::uint8_t> out;
  for (;;) {
    const int last = br.bits(1);
    const int type = br.bits(2);
    if (type == 0) {
      br.align_byte();
      if (br.pos + 4 > br.size) throw CorruptionError("PNG: stored block truncated");
      const int len = br.data[br.pos] | (br.data[br.pos + 1] << 8);
      const int nlen = br.data[br.pos + 2] | (br.data[br.pos + 3] << 8);
      if ((len ^ 0xFFFF) != nlen) throw CorruptionError("PNG: stored block length check failed");
      br.pos += 4;
      if (br.pos + size_t(len) > br.size) throw CorruptionError("PNG: stored block truncated");
      out.insert(out.end(), br.data + br.pos, br.data + br.pos + len);
      br.pos += size_t(len);
    } else if (type == 1) {
      static const auto fixed = [] {
        std::pair<Huffman, Huffman> h;
        std::uint8_t lit_len[288];
        for (int i = 0; i < 144; ++i) lit_len[i] = 8;
        for (int i = 144; i < 256; ++i) lit_len[i] = 9;
        for (int i = 256; i < 280; ++i) lit_len[i] = 7;
        for (int i = 280; i < 288; ++i) lit_len[i] = 8;
        h.first.build(lit_len, 288);
        std::uint8_t dist_len[30];
        for (int i = 0; i < 30; ++i) dist_len[i] = 5;
        h.second.build(dist_len, 30);
        return h;
      }();
      inflate_block_data(br, fixed.first, fixed.second, out);
    } else if (type == 2) {
      const int hlit = br.bits(5) + 257;
      const int hdist = br.bits(5) + 1;
      const int hclen = br.bits(4) + 4;
      static const int order[19] = {16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15};
      std::uint8_t clen[19] = {0};
      for (int i = 0; i < hclen; ++i) clen[order[i]] = std::uint8_t(br.bits(3));
      Huffman code_huff;
      code_huff.build(clen, 19);
      std::vector<std::uint8_t> lengths(size_t(hlit + hdist), 0);
      for (int i = 0; i < hlit + hdist;) {
        const int sym = code_huff.decode(br);
        if (sym < 16) {
          lengths[size_t(i++)] = std::uint8_t(sym);
        } else if (sym == 16) {
          if (i == 0) throw CorruptionError("PNG: repeat with no previous length");
          const int rep = 3 + br.bits(2);
          for (int r = 0; r < rep && i < hlit + hdist; ++r, ++i)
            lengths[size_t(i)] = lengths[size_t(i - 1)];
        } else if (sym == 17) {
          i += 3 + br.bits(3);
        } else {
          i += 11 + br.bits(7);
        }
      }
      Huffman lit, dist;
      lit.build(lengths.data(), hlit);
      dist.build(lengths.data() + hlit, hdist);
      inflate_block_data(br, lit, dist, out);
    } else {
      throw CorruptionError("PNG: invalid deflate block type");
    }
    if (last) break;
  }
  return out;
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

struct DecodedPng {
  int width = 0, height = 0, bit_depth = 0, color_type = 0;
  std::vector<std::uint8_t> data;  // de-filtered raw samples
  std::vector<std::array<std::uint8_t, 3>> palette;
};

DecodedPng decode_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open PNG: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw FormatError("not a PNG file: " + path);

  DecodedPng png;
  std::vector<std::uint8_t> idat;
  size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 8 <= bytes.size() && !saw_iend) {
    const std::uint32_t len = (std::uint32_t(bytes[pos]) << 24) | (std::uint32_t(bytes[pos + 1]) << 16) |
                              (std::uint32_t(bytes[pos + 2]) << 8) | bytes[pos + 3];
    if (pos + 12 + len > bytes.size()) throw CorruptionError("PNG: chunk exceeds file size");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const std::uint8_t* payload = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw CorruptionError("PNG: bad IHDR length");
      png.width = int((std::uint32_t(payload[0]) << 24) | (std::uint32_t(payload[1]) << 16) |
                      (std::uint32_t(payload[2]) << 8) | payload[3]);
      png.height = int((std::uint32_t(payload[4]) << 24) | (std::uint32_t(payload[5]) << 16) |
                       (std::uint32_t(payload[6]) << 8) | payload[7]);
      png.bit_depth = payload[8];
      png.color_type = payload[9];
      if (payload[12] != 0) throw FormatError("PNG: interlaced images unsupported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "PLTE", 4) == 0) {
      for (std::uint32_t i = 0; i + 2 < len; i += 3)
        png.palette.push_back({payload[i], payload[i + 1], payload[i + 2]});
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr) throw CorruptionError("PNG: missing IHDR");
  if (idat.empty()) throw CorruptionError("PNG: missing IDAT");

  int channels;
  switch (png.color_type) {
    case 0: channels = 1; break;
    case 2: channels = 3; break;
    case 3: channels = 1; break;
    case 4: channels = 2; break;
    case 6: channels = 4; break;
    default: throw FormatError("PNG: unsupported color type");
  }
  if (png.bit_depth != 8 && png.bit_depth != 16)
    throw FormatError("PNG: only 8/16-bit depths supported");

  const std::vector<std::uint8_t> raw = zlib_inflate(idat.data(), idat.size());
  const int bpp = channels * png.bit_depth / 8;
  const size_t stride = size_t(png.width) * size_t(bpp);
  if (raw.size() != size_t(png.height) * (stride + 1))
    throw CorruptionError("PNG: decoded size mismatch");

  png.data.assign(size_t(png.height) * stride, 0);
  for (int y = 0; y < png.height; ++y) {
    const std::uint8_t filter = raw[size_t(y) * (stride + 1)];
    const std::uint8_t* src = raw.data() + size_t(y) * (stride + 1) + 1;
    std::uint8_t* dst = png.data.data() + size_t(y) * stride;
    const std::uint8_t* prev = y > 0 ? png.data.data() + size_t(y - 1) * stride : nullptr;
    for (size_t x = 0; x < stride; ++x) {
      const int a = x >= size_t(bpp) ? dst[x - size_t(bpp)] : 0;
      const int b = prev ? prev[x] : 0;
      const int c = (prev && x >= size_t(bpp)) ? prev[x - size_t(bpp)] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw CorruptionError("PNG: unknown filter type");
      }
      dst[x] = std::uint8_t(v & 0xFF);
    }
  }
  return png;
}

}  // namespace

ImageU8 read_png_rgb8(const std::string& path) {
  const DecodedPng png = decode_png(path);
  ImageU8 out{png.width, png.height, 3, {}};
  out.pixels.resize(size_t(png.width) * size_t(png.height) * 3);
  const size_t n = size_t(png.width) * size_t(png.height);
  if (png.color_type == 2 && png.bit_depth == 8) {
    out.pixels = png.data;
  } else if (png.color_type == 6 && png.bit_depth == 8) {
    for (size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) out.pixels[i * 3 + size_t(c)] = png.data[i * 4 + size_t(c)];
  } else if (png.color_type == 0 && png.bit_depth == 8) {
    for (size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) out.pixels[i * 3 + size_t(c)] = png.data[i];
  } else if (png.color_type == 3 && png.bit_depth == 8) {
    for (size_t i = 0; i < n; ++i) {
      const std::uint8_t idx = png.data[i];
      if (idx >= png.palette.size()) throw CorruptionError("PNG: palette index out of range");
      for (int c = 0; c < 3; ++c) out.pixels[i * 3 + size_t(c)] = png.palette[idx][size_t(c)];
    }
  } else {
    throw FormatError("PNG: unsupported format for RGB read");
  }
  return out;
}

std::vector<std::uint16_t> read_png_gray16(const std::string& path, int& width, int& height) {
  const DecodedPng png = decode_png(path);
  if (png.color_type != 0 || png.bit_depth != 16)
    throw FormatError("PNG: expected 16-bit grayscale: " + path);
  width = png.width;
  height = png.height;
  std::vector<std::uint16_t> out(size_t(width) * size_t(height));
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = std::uint16_t((png.data[2 * i] << 8) | png.data[2 * i + 1]);
  return out;
}

}  // namespace mufasa
