#pragma once

// File and network plumbing: PNG frames, WAV audio, label tables, raw float64
// array caches with manifests, checksums, a minimal ZIP extractor, and the
// dataset ingestion client.

#include "cmkt/common.hpp"
#include "cmkt/data.hpp"

#include <json.hpp>
#include <png.h>
#include <zlib.h>

#include <openssl/evp.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cmkt::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG

struct Image8 {
  std::size_t width = 0, height = 0, channels = 0;  // channels: 1 or 3
  std::vector<std::uint8_t> pixels;                 // interleaved
};

inline Image8 read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw Error("cannot open PNG: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw Error("failed to decode PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image8 img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.pixels.resize(img.width * img.height * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = img.pixels.data() + y * img.width * img.channels;
  }
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  if (img.channels != 1 && img.channels != 3) {
    throw Error("unsupported PNG channel count in " + path);
  }
  return img;
}

inline void write_png(const std::string& path, const Image8& img) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw Error("cannot open PNG for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("failed to encode PNG: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// ---------------------------------------------------------------------------
// WAV (PCM16 or float32, mono)

inline Vec read_wav(const std::string& path, std::size_t expected_rate = data::kSampleRate) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open WAV: " + path);
  const auto read_u32 = [&] {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  const auto read_u16 = [&] {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  };
  char tag[5] = {0};
  is.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw Error("not a RIFF file: " + path);
  read_u32();
  is.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw Error("not a WAVE file: " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::vector<char> payload;
  while (is.read(tag, 4)) {
    const std::uint32_t size = read_u32();
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      format = read_u16();
      channels = read_u16();
      rate = read_u32();
      read_u32();
      read_u16();
      bits = read_u16();
      if (size > 16) is.seekg(size - 16, std::ios::cur);
    } else if (std::strncmp(tag, "data", 4) == 0) {
      payload.resize(size);
      is.read(payload.data(), size);
      break;
    } else {
      is.seekg(size + (size & 1), std::ios::cur);
    }
  }
  if (payload.empty()) throw Error("WAV has no data chunk: " + path);
  if (channels != 1) throw Error("expected mono WAV, got " + std::to_string(channels) + " channels");
  if (rate != expected_rate) {
    throw Error("expected " + std::to_string(expected_rate) + " Hz WAV, got " +
                std::to_string(rate));
  }

  Vec samples;
  if (format == 1 && bits == 16) {
    const std::size_t n = payload.size() / 2;
    samples.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const auto lo = static_cast<unsigned char>(payload[2 * i]);
      const auto hi = static_cast<signed char>(payload[2 * i + 1]);
      samples[static_cast<Eigen::Index>(i)] =
          static_cast<double>((hi << 8) | lo) / 32768.0;
    }
  } else if (format == 3 && bits == 32) {
    const std::size_t n = payload.size() / 4;
    samples.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, payload.data() + 4 * i, 4);
      samples[static_cast<Eigen::Index>(i)] = static_cast<double>(f);
    }
  } else {
    throw Error("unsupported WAV encoding in " + path);
  }
  return samples;
}

inline void write_wav(const std::string& path, const Vec& samples,
                      std::size_t rate = data::kSampleRate) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open WAV for writing: " + path);
  const auto u32 = [&](std::uint32_t v) {
    char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                 static_cast<char>(v >> 24)};
    os.write(b, 4);
  };
  const auto u16 = [&](std::uint16_t v) {
    char b[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
    os.write(b, 2);
  };
  const auto n = static_cast<std::uint32_t>(samples.size());
  os.write("RIFF", 4);
  u32(36 + n * 2);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  u32(16);
  u16(1);  // PCM
  u16(1);  // mono
  u32(static_cast<std::uint32_t>(rate));
  u32(static_cast<std::uint32_t>(rate * 2));
  u16(2);
  u16(16);
  os.write("data", 4);
  u32(n * 2);
  for (Eigen::Index i = 0; i < samples.size(); ++i) {
    const double clamped = std::clamp(samples[i], -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
    u16(static_cast<std::uint16_t>(v));
  }
}

// ---------------------------------------------------------------------------
// Labels table: "index,label" rows, optional header.

inline std::map<std::size_t, int> read_labels_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open labels file: " + path);
  std::map<std::size_t, int> labels;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty() || line.back() == '\r') {
      if (!line.empty()) line.pop_back();
      if (line.empty()) continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw Error("malformed labels row: " + line);
    const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
    if (first && a.find_first_not_of("0123456789") != std::string::npos) {
      first = false;  // header row
      continue;
    }
    first = false;
    try {
      const std::size_t index = std::stoul(a);
      const int label = std::stoi(b);
      if (label != 0 && label != 1) throw Error("label outside {0,1} at index " + a);
      labels[index] = label;
    } catch (const std::invalid_argument&) {
      throw Error("malformed labels row: " + line);
    }
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Raw little-endian float64 array files

inline void write_f64(const std::string& path, const double* values, std::size_t n) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open array file for writing: " + path);
  os.write(reinterpret_cast<const char*>(values), static_cast<std::streamsize>(n * sizeof(double)));
  if (!os) throw Error("array write failed: " + path);
}

inline std::vector<double> read_f64(const std::string& path, std::size_t expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open array file: " + path);
  std::vector<double> v(expected);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(expected * sizeof(double)));
  if (static_cast<std::size_t>(is.gcount()) != expected * sizeof(double)) {
    throw Error("array file truncated: " + path);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Checksums

inline std::string digest_hex(const std::string& algorithm, const void* bytes, std::size_t n) {
  const EVP_MD* md = EVP_get_digestbyname(algorithm.c_str());
  if (!md) throw Error("unknown digest: " + algorithm);
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int out_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, md, nullptr);
  EVP_DigestUpdate(ctx, bytes, n);
  EVP_DigestFinal_ex(ctx, out, &out_len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < out_len; ++i) {
    s += hex[out[i] >> 4];
    s += hex[out[i] & 0xf];
  }
  return s;
}

inline std::string md5_hex(const std::string& bytes) {
  return digest_hex("MD5", bytes.data(), bytes.size());
}

inline std::string sha256_hex(const std::string& bytes) {
  return digest_hex("SHA256", bytes.data(), bytes.size());
}

inline std::string file_md5(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for checksum: " + path);
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return md5_hex(content);
}

// ---------------------------------------------------------------------------
// Minimal ZIP extraction (stored and deflate entries)

namespace detail {

inline std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::vector<unsigned char> inflate_raw(const unsigned char* src, std::size_t src_len,
                                              std::size_t dst_len) {
  std::vector<unsigned char> out(dst_len);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw Error("zip: inflateInit failed");
  zs.next_in = const_cast<unsigned char*>(src);
  zs.avail_in = static_cast<uInt>(src_len);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(dst_len);
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) throw Error("zip: inflate failed");
  return out;
}

}  // namespace detail

inline void extract_zip(const std::string& zip_path, const std::string& dest_dir) {
  std::ifstream is(zip_path, std::ios::binary);
  if (!is) throw Error("cannot open archive: " + zip_path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 22) throw Error("not a zip archive: " + zip_path);

  // end-of-central-directory record
  std::size_t eocd = std::string::npos;
  for (std::size_t i = buf.size() - 22; i + 4 >= 4; --i) {
    if (buf[i] == 0x50 && buf[i + 1] == 0x4b && buf[i + 2] == 0x05 && buf[i + 3] == 0x06) {
      eocd = i;
      break;
    }
    if (i == 0) break;
  }
  if (eocd == std::string::npos) throw Error("zip: end record not found in " + zip_path);
  const std::uint16_t entries = detail::le16(&buf[eocd + 10]);
  std::size_t cd = detail::le32(&buf[eocd + 16]);

  fs::create_directories(dest_dir);
  for (std::uint16_t e = 0; e < entries; ++e) {
    if (detail::le32(&buf[cd]) != 0x02014b50) throw Error("zip: bad central directory");
    const std::uint16_t method = detail::le16(&buf[cd + 10]);
    const std::uint32_t crc = detail::le32(&buf[cd + 16]);
    const std::uint32_t csize = detail::le32(&buf[cd + 20]);
    const std::uint32_t usize = detail::le32(&buf[cd + 24]);
    const std::uint16_t name_len = detail::le16(&buf[cd + 28]);
    const std::uint16_t extra_len = detail::le16(&buf[cd + 30]);
    const std::uint16_t comment_len = detail::le16(&buf[cd + 32]);
    const std::uint32_t local_off = detail::le32(&buf[cd + 42]);
    const std::string name(reinterpret_cast<const char*>(&buf[cd + 46]), name_len);
    cd += 46 + name_len + extra_len + comment_len;

    if (name.find("..") != std::string::npos) throw Error("zip: unsafe entry name " + name);
    const fs::path target = fs::path(dest_dir) / name;
    if (!name.empty() && name.back() == '/') {
      fs::create_directories(target);
      continue;
    }
    // local header gives the actual data offset
    if (detail::le32(&buf[local_off]) != 0x04034b50) throw Error("zip: bad local header");
    const std::uint16_t lname = detail::le16(&buf[local_off + 26]);
    const std::uint16_t lextra = detail::le16(&buf[local_off + 28]);
    const std::size_t data_off = local_off + 30 + lname + lextra;

    std::vector<unsigned char> content;
    if (method == 0) {
      content.assign(buf.begin() + static_cast<long>(data_off),
                     buf.begin() + static_cast<long>(data_off + csize));
    } else if (method == 8) {
      content = detail::inflate_raw(&buf[data_off], csize, usize);
    } else {
      throw Error("zip: unsupported compression method for " + name);
    }
    if (crc32(0, content.data(), static_cast<uInt>(content.size())) != crc) {
      throw Error("zip: CRC mismatch for " + name);
    }
    fs::create_directories(target.parent_path());
    std::ofstream os(target, std::ios::binary);
    os.write(reinterpret_cast<const char*>(content.data()),
             static_cast<std::streamsize>(content.size()));
    if (!os) throw Error("zip: write failed for " + target.string());
  }
}

// ---------------------------------------------------------------------------
// Raw dataset directory -> paired samples

// Layout: frames/<index>.png (480x480x3 or 80x80 gray), labels.csv, and
// either audio/<index>.wav per snippet or one long audio.wav segmented in
// index order.
inline std::vector<data::PairedSample> read_raw_dataset(const std::string& dir) {
  const fs::path root(dir);
  const auto labels = read_labels_csv((root / "labels.csv").string());
  if (labels.empty()) throw Error("no labels in " + dir);

  std::vector<data::AudioSnippet> long_audio;
  const bool per_index_audio = fs::exists(root / "audio");
  if (!per_index_audio) {
    const fs::path wav = root / "audio.wav";
    if (!fs::exists(wav)) throw Error("dataset has neither audio/ nor audio.wav: " + dir);
    long_audio = data::segment_audio(read_wav(wav.string()));
  }

  std::vector<data::PairedSample> samples;
  std::vector<std::string> problems;
  for (const auto& [index, label] : labels) {
    const fs::path frame = root / "frames" / (std::to_string(index) + ".png");
    if (!fs::exists(frame)) {
      problems.push_back("missing frame for index " + std::to_string(index));
      continue;
    }
    data::PairedSample s;
    s.index = index;
    s.label = label;

    const Image8 img = read_png(frame.string());
    if (img.width == data::kRawSize && img.height == data::kRawSize && img.channels == 3) {
      data::RawVisualFrame raw;
      raw.index = index;
      raw.pixels.assign(img.pixels.begin(), img.pixels.end());
      s.visual = data::grayscale_resize(raw);
    } else if (img.width == data::kImgSize && img.height == data::kImgSize && img.channels == 1) {
      s.visual.pixels = Mat(data::kImgSize, data::kImgSize);
      for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        s.visual.pixels.data()[i] = static_cast<double>(img.pixels[i]) / 255.0;
      }
    } else {
      problems.push_back("frame " + std::to_string(index) + " has unsupported shape");
      continue;
    }

    if (per_index_audio) {
      const fs::path wav = root / "audio" / (std::to_string(index) + ".wav");
      if (!fs::exists(wav)) {
        problems.push_back("missing audio for index " + std::to_string(index));
        continue;
      }
      Vec w = read_wav(wav.string());
      if (w.size() != static_cast<Eigen::Index>(data::kSnippetLen)) {
        problems.push_back("audio " + std::to_string(index) + " has wrong length");
        continue;
      }
      s.audio_raw.samples = w;
    } else {
      if (index >= long_audio.size()) {
        problems.push_back("audio.wav too short for index " + std::to_string(index));
        continue;
      }
      s.audio_raw = long_audio[index];
    }
    s.audio_spec = data::make_spectrogram(s.audio_raw);
    samples.push_back(std::move(s));
  }
  if (!problems.empty()) {
    std::string msg = "malformed dataset (" + std::to_string(problems.size()) + " problems):";
    for (std::size_t i = 0; i < problems.size() && i < 10; ++i) msg += "\n  " + problems[i];
    throw Error(msg);
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Preprocessed cache: one binary array per split per modality + manifest.

inline void write_cache(const std::string& dir, const data::DatasetSplit& split,
                        const json& parameters) {
  fs::create_directories(dir);
  json manifest;
  manifest["dtype"] = "float64-le";
  manifest["parameters"] = parameters;

  const auto dump = [&](const char* name, const std::vector<data::PairedSample>& samples) {
    const std::size_t n = samples.size();
    std::vector<double> visual(n * 6400), audioraw(n * data::kSnippetLen), audiospec(n * 6400);
    std::vector<double> labels(n), indices(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::memcpy(&visual[i * 6400], samples[i].visual.pixels.data(), 6400 * sizeof(double));
      std::memcpy(&audioraw[i * data::kSnippetLen], samples[i].audio_raw.samples.data(),
                  data::kSnippetLen * sizeof(double));
      std::memcpy(&audiospec[i * 6400], samples[i].audio_spec.pixels.data(), 6400 * sizeof(double));
      labels[i] = samples[i].label;
      indices[i] = static_cast<double>(samples[i].index);
    }
    const std::string base = std::string(name);
    write_f64((fs::path(dir) / (base + "_visual.f64")).string(), visual.data(), visual.size());
    write_f64((fs::path(dir) / (base + "_audioraw.f64")).string(), audioraw.data(), audioraw.size());
    write_f64((fs::path(dir) / (base + "_audiospec.f64")).string(), audiospec.data(),
              audiospec.size());
    write_f64((fs::path(dir) / (base + "_labels.f64")).string(), labels.data(), labels.size());
    write_f64((fs::path(dir) / (base + "_indices.f64")).string(), indices.data(), indices.size());
    manifest["arrays"][base] = {{"count", n},
                                {"visual_shape", {n, 80, 80}},
                                {"audioraw_shape", {n, data::kSnippetLen}},
                                {"audiospec_shape", {n, 80, 80}}};
  };
  dump("train", split.train);
  dump("validation", split.validation);
  dump("test", split.test);

  std::ofstream os(fs::path(dir) / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw Error("cannot write cache manifest in " + dir);
}

inline data::DatasetSplit read_cache(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw Error("no cache manifest in " + dir);
  const json manifest = json::parse(is);

  data::DatasetSplit split;
  const auto load = [&](const char* name, std::vector<data::PairedSample>& out) {
    const auto& meta = manifest.at("arrays").at(name);
    const auto n = meta.at("count").get<std::size_t>();
    const std::string base = std::string(name);
    const auto visual = read_f64((fs::path(dir) / (base + "_visual.f64")).string(), n * 6400);
    const auto audioraw =
        read_f64((fs::path(dir) / (base + "_audioraw.f64")).string(), n * data::kSnippetLen);
    const auto audiospec = read_f64((fs::path(dir) / (base + "_audiospec.f64")).string(), n * 6400);
    const auto labels = read_f64((fs::path(dir) / (base + "_labels.f64")).string(), n);
    const auto indices = read_f64((fs::path(dir) / (base + "_indices.f64")).string(), n);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i].visual.pixels = Mat(80, 80);
      std::memcpy(out[i].visual.pixels.data(), &visual[i * 6400], 6400 * sizeof(double));
      out[i].audio_raw.samples = Vec(data::kSnippetLen);
      std::memcpy(out[i].audio_raw.samples.data(), &audioraw[i * data::kSnippetLen],
                  data::kSnippetLen * sizeof(double));
      out[i].audio_spec.pixels = Mat(80, 80);
      std::memcpy(out[i].audio_spec.pixels.data(), &audiospec[i * 6400], 6400 * sizeof(double));
      out[i].label = static_cast<int>(labels[i]);
      out[i].index = static_cast<std::size_t>(indices[i]);
    }
  };
  load("train", split.train);
  load("validation", split.validation);
  load("test", split.test);
  return split;
}

}  // namespace cmkt::io
