#pragma once

#include "brainfold/common.hpp"
#include "brainfold/types.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace brainfold::io {

// ---------------------------------------------------------------------------
// Little-endian primitives. All binary formats are explicitly little-endian;
// bytes are packed by hand so the files are portable across hosts.
// ---------------------------------------------------------------------------

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  write_u32(out, static_cast<std::uint32_t>(v));
  write_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& out, float v) {
  write_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void write_f64(std::ostream& out, double v) {
  write_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t read_u32(std::istream& in, const std::string& stage) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(in.good(), stage, "unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& in, const std::string& stage) {
  const std::uint64_t lo = read_u32(in, stage);
  const std::uint64_t hi = read_u32(in, stage);
  return lo | (hi << 32);
}

inline float read_f32(std::istream& in, const std::string& stage) {
  return std::bit_cast<float>(read_u32(in, stage));
}

inline double read_f64(std::istream& in, const std::string& stage) {
  return std::bit_cast<double>(read_u64(in, stage));
}

inline void write_magic(std::ostream& out, const char* magic) {
  out.write(magic, 6);
}

inline void expect_magic(std::istream& in, const char* magic, const std::string& stage) {
  char buf[6] = {};
  in.read(buf, 6);
  require(in.good() && std::memcmp(buf, magic, 6) == 0, stage,
          std::string("bad magic, expected ") + magic);
}

inline std::ofstream open_output(const std::filesystem::path& path, const std::string& stage) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), stage, "cannot open for writing: " + path.string());
  return out;
}

inline std::ifstream open_input(const std::filesystem::path& path, const std::string& stage) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), stage, "cannot open for reading: " + path.string());
  return in;
}

// ---------------------------------------------------------------------------
// BFEEG1: header = magic "BFEEG1", u32 record count, u32 channels,
// u32 samples_per_record, f32 sample_rate; each record = u32 subject_id,
// u32 image_id, u32 class_id, channels x samples f32 channel-major.
// ---------------------------------------------------------------------------

struct RawEegFile {
  std::uint32_t channels = 0;
  std::uint32_t samples_per_record = 0;
  float sample_rate_hz = 250.0f;
  std::vector<EegSequence> records;
};

inline void write_eeg_file(const std::filesystem::path& path, const std::vector<EegSequence>& records,
                           const std::string& stage = "eeg-write") {
  require(!records.empty(), stage, "refusing to write a file with no records");
  const Eigen::Index channels = records.front().channels();
  const Eigen::Index samples = records.front().length();
  auto out = open_output(path, stage);
  write_magic(out, "BFEEG1");
  write_u32(out, static_cast<std::uint32_t>(records.size()));
  write_u32(out, static_cast<std::uint32_t>(channels));
  write_u32(out, static_cast<std::uint32_t>(samples));
  write_f32(out, static_cast<float>(records.front().sample_rate_hz));
  for (const EegSequence& seq : records) {
    require(seq.channels() == channels && seq.length() == samples, stage,
            "record shape differs from header");
    write_u32(out, seq.subject_id);
    write_u32(out, seq.image_id);
    write_u32(out, seq.class_id);
    for (Eigen::Index c = 0; c < channels; ++c)
      for (Eigen::Index t = 0; t < samples; ++t)
        write_f32(out, static_cast<float>(seq.samples(c, t)));
  }
  require(out.good(), stage, "write failed: " + path.string());
}

inline RawEegFile read_eeg_file(const std::filesystem::path& path,
                                const std::string& stage = "eeg-load") {
  auto in = open_input(path, stage);
  expect_magic(in, "BFEEG1", stage);
  RawEegFile file;
  const std::uint32_t count = read_u32(in, stage);
  file.channels = read_u32(in, stage);
  file.samples_per_record = read_u32(in, stage);
  file.sample_rate_hz = read_f32(in, stage);
  require(count > 0, stage, "no records");
  require(file.channels > 0 && file.samples_per_record > 0, stage, "malformed header");
  file.records.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    EegSequence seq;
    seq.subject_id = read_u32(in, stage);
    seq.image_id = read_u32(in, stage);
    seq.class_id = read_u32(in, stage);
    seq.sample_rate_hz = file.sample_rate_hz;
    seq.samples.resize(file.channels, file.samples_per_record);
    for (std::uint32_t c = 0; c < file.channels; ++c)
      for (std::uint32_t t = 0; t < file.samples_per_record; ++t) {
        if (!in.good()) fail(stage, "truncated record " + std::to_string(r));
        seq.samples(c, t) = read_f32(in, stage);
      }
    file.records.push_back(std::move(seq));
  }
  return file;
}

// CSV import path: one row per (record, channel);
// columns subject_id,image_id,class_id,sample_rate_hz,channel,s0,s1,...
// Rows of one record must be contiguous with channel indices 0..C-1.
inline RawEegFile read_eeg_csv(const std::filesystem::path& path,
                               const std::string& stage = "eeg-load") {
  std::ifstream in(path);
  require(in.good(), stage, "cannot open for reading: " + path.string());
  RawEegFile file;
  std::string line;
  std::getline(in, line);  // header row
  std::vector<std::vector<double>> channel_rows;
  EegSequence current;
  std::uint64_t line_no = 1;
  auto flush_record = [&]() {
    if (channel_rows.empty()) return;
    current.samples.resize(static_cast<Eigen::Index>(channel_rows.size()),
                           static_cast<Eigen::Index>(channel_rows.front().size()));
    for (std::size_t c = 0; c < channel_rows.size(); ++c) {
      require(channel_rows[c].size() == channel_rows.front().size(), stage,
              "ragged channel rows near line " + std::to_string(line_no));
      for (std::size_t t = 0; t < channel_rows[c].size(); ++t)
        current.samples(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) =
            channel_rows[c][t];
    }
    file.records.push_back(current);
    channel_rows.clear();
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    require(cells.size() >= 6, stage, "too few columns at line " + std::to_string(line_no));
    EegSequence header;
    std::uint32_t channel_index = 0;
    try {
      header.subject_id = static_cast<std::uint32_t>(std::stoul(cells[0]));
      header.image_id = static_cast<std::uint32_t>(std::stoul(cells[1]));
      header.class_id = static_cast<std::uint32_t>(std::stoul(cells[2]));
      header.sample_rate_hz = std::stod(cells[3]);
      channel_index = static_cast<std::uint32_t>(std::stoul(cells[4]));
    } catch (const std::exception&) {
      fail(stage, "malformed row at line " + std::to_string(line_no));
    }
    if (channel_index == 0) {
      flush_record();
      current = header;
    } else {
      require(header.subject_id == current.subject_id && header.image_id == current.image_id,
              stage, "channel row does not match its record at line " + std::to_string(line_no));
    }
    require(channel_index == channel_rows.size(), stage,
            "out-of-order channel index at line " + std::to_string(line_no));
    std::vector<double> samples;
    samples.reserve(cells.size() - 5);
    for (std::size_t i = 5; i < cells.size(); ++i) {
      try {
        samples.push_back(std::stod(cells[i]));
      } catch (const std::exception&) {
        fail(stage, "malformed sample at line " + std::to_string(line_no));
      }
    }
    channel_rows.push_back(std::move(samples));
  }
  flush_record();
  require(!file.records.empty(), stage, "no records");
  file.channels = static_cast<std::uint32_t>(file.records.front().channels());
  file.samples_per_record = static_cast<std::uint32_t>(file.records.front().length());
  file.sample_rate_hz = static_cast<float>(file.records.front().sample_rate_hz);
  for (const EegSequence& seq : file.records)
    require(seq.channels() == file.records.front().channels() &&
                seq.length() == file.records.front().length(),
            stage, "records disagree on shape");
  return file;
}

inline void write_eeg_csv(const std::filesystem::path& path, const std::vector<EegSequence>& records,
                          const std::string& stage = "eeg-write") {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), stage, "cannot open for writing: " + path.string());
  out << "subject_id,image_id,class_id,sample_rate_hz,channel,samples...\n";
  out.precision(17);
  for (const EegSequence& seq : records)
    for (Eigen::Index c = 0; c < seq.channels(); ++c) {
      out << seq.subject_id << ',' << seq.image_id << ',' << seq.class_id << ','
          << seq.sample_rate_hz << ',' << c;
      for (Eigen::Index t = 0; t < seq.length(); ++t) out << ',' << seq.samples(c, t);
      out << '\n';
    }
}

// ---------------------------------------------------------------------------
// BFIMF1: magic, u32 record count, u32 dimension, [u32 aggregation tag],
// records = u32 image_id, D x f32. The aggregation tag is present in tables
// produced by feature extraction; plain image-feature files omit it. The
// reader detects the tag from the remaining byte count, so both layouts load
// through the same path.
// ---------------------------------------------------------------------------

inline void write_feature_table(const std::filesystem::path& path, const ImageFeatureTable& table,
                                bool with_aggregation_tag,
                                const std::string& stage = "features-write") {
  auto out = open_output(path, stage);
  write_magic(out, "BFIMF1");
  write_u32(out, static_cast<std::uint32_t>(table.features.size()));
  write_u32(out, static_cast<std::uint32_t>(table.dimension()));
  if (with_aggregation_tag) write_u32(out, static_cast<std::uint32_t>(table.aggregation));
  for (const auto& [image_id, values] : table.features) {
    require(values.size() == table.dimension(), stage, "inconsistent feature dimension");
    write_u32(out, image_id);
    for (Eigen::Index i = 0; i < values.size(); ++i)
      write_f32(out, static_cast<float>(values[i]));
  }
  require(out.good(), stage, "write failed: " + path.string());
}

inline ImageFeatureTable read_feature_table(const std::filesystem::path& path,
                                            const std::string& stage = "features-load") {
  auto in = open_input(path, stage);
  const auto file_size = std::filesystem::file_size(path);
  expect_magic(in, "BFIMF1", stage);
  const std::uint32_t count = read_u32(in, stage);
  const std::uint32_t dim = read_u32(in, stage);
  require(dim > 0, stage, "zero feature dimension");
  const std::uintmax_t body = static_cast<std::uintmax_t>(count) * (4u + 4u * dim);
  ImageFeatureTable table;
  if (file_size == 14 + 4 + body) {
    const std::uint32_t tag = read_u32(in, stage);
    require(tag <= 2, stage, "unknown aggregation tag");
    table.aggregation = static_cast<FeatureAggregation>(tag);
  } else {
    require(file_size == 14 + body, stage, "file size does not match header");
  }
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint32_t image_id = read_u32(in, stage);
    Vec values(dim);
    for (std::uint32_t i = 0; i < dim; ++i) values[i] = read_f32(in, stage);
    const bool fresh = table.features.emplace(image_id, std::move(values)).second;
    require(fresh, stage, "duplicate image_id " + std::to_string(image_id));
  }
  return table;
}

// ---------------------------------------------------------------------------
// BFFEA1: un-aggregated per-sequence feature archive, the intermediate between
// extract-features and aggregate. records = u32 image_id, u32 subject_id,
// f64 classification loss, D x f32 values.
// ---------------------------------------------------------------------------

struct FeatureArchiveRecord {
  std::uint32_t image_id = 0;
  std::uint32_t subject_id = 0;
  double classification_loss = 0.0;
  Vec values;
};

inline void write_feature_archive(const std::filesystem::path& path,
                                  const std::vector<FeatureArchiveRecord>& records,
                                  const std::string& stage = "features-write") {
  require(!records.empty(), stage, "refusing to write an empty archive");
  auto out = open_output(path, stage);
  write_magic(out, "BFFEA1");
  write_u32(out, static_cast<std::uint32_t>(records.size()));
  write_u32(out, static_cast<std::uint32_t>(records.front().values.size()));
  for (const FeatureArchiveRecord& rec : records) {
    require(rec.values.size() == records.front().values.size(), stage,
            "inconsistent feature dimension");
    write_u32(out, rec.image_id);
    write_u32(out, rec.subject_id);
    write_f64(out, rec.classification_loss);
    for (Eigen::Index i = 0; i < rec.values.size(); ++i)
      write_f32(out, static_cast<float>(rec.values[i]));
  }
  require(out.good(), stage, "write failed: " + path.string());
}

inline std::vector<FeatureArchiveRecord> read_feature_archive(
    const std::filesystem::path& path, const std::string& stage = "features-load") {
  auto in = open_input(path, stage);
  expect_magic(in, "BFFEA1", stage);
  const std::uint32_t count = read_u32(in, stage);
  const std::uint32_t dim = read_u32(in, stage);
  require(count > 0 && dim > 0, stage, "malformed header");
  std::vector<FeatureArchiveRecord> records;
  records.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    FeatureArchiveRecord rec;
    rec.image_id = read_u32(in, stage);
    rec.subject_id = read_u32(in, stage);
    rec.classification_loss = read_f64(in, stage);
    rec.values.resize(dim);
    for (std::uint32_t i = 0; i < dim; ++i) rec.values[i] = read_f32(in, stage);
    records.push_back(std::move(rec));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Named f64 tensors, shared by the model file formats.
// Layout: u32 name length, name bytes, u32 rank, u32 dims..., f64 values.
// ---------------------------------------------------------------------------

inline void write_tensor(std::ostream& out, const std::string& name,
                         const std::vector<std::uint32_t>& dims, const double* data) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(out, static_cast<std::uint32_t>(dims.size()));
  std::uint64_t total = 1;
  for (std::uint32_t d : dims) {
    write_u32(out, d);
    total *= d;
  }
  for (std::uint64_t i = 0; i < total; ++i) write_f64(out, data[i]);
}

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

inline NamedTensor read_tensor(std::istream& in, const std::string& stage) {
  NamedTensor t;
  const std::uint32_t name_len = read_u32(in, stage);
  require(name_len > 0 && name_len < 4096, stage, "implausible tensor name length");
  t.name.resize(name_len);
  in.read(t.name.data(), name_len);
  require(in.good(), stage, "truncated tensor name");
  const std::uint32_t rank = read_u32(in, stage);
  require(rank <= 4, stage, "implausible tensor rank");
  std::uint64_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.dims.push_back(read_u32(in, stage));
    total *= t.dims.back();
  }
  t.values.resize(total);
  for (std::uint64_t i = 0; i < total; ++i) t.values[i] = read_f64(in, stage);
  return t;
}

}  // namespace brainfold::io
