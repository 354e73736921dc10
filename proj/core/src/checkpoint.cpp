#include "earm/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace earm {

namespace {

constexpr char kMagic[] = "EARMCKPT1";

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void append_f64(std::string& out, double x) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

double read_f64(const std::string& in, std::size_t offset) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + static_cast<std::size_t>(b)]))
            << (8 * b);
  return std::bit_cast<double>(bits);
}

// JSON cannot carry inf/nan doubles; encode them as strings.
nlohmann::json encode_double(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

double decode_double(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  const std::string s = j.get<std::string>();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  throw std::runtime_error("checkpoint: bad encoded double " + s);
}

struct Block {
  std::string name;
  std::vector<double> values;
};

nlohmann::json model_header(const ArModel& model, std::uint64_t seed, std::int64_t step) {
  nlohmann::json j;
  j["version"] = 1;
  j["realization"] = std::string(model.realization());
  j["V"] = model.vocab_size();
  j["K"] = model.max_seq_length();
  if (model.realization() == "tabular") {
    const auto& m = dynamic_cast<const TabularModel&>(model);
    j["dims"] = {{"order", m.order()}};
  } else if (model.realization() == "recurrent") {
    const auto& m = dynamic_cast<const RecurrentModel&>(model);
    j["dims"] = {{"embed", m.embed_dim()}, {"hidden", m.hidden_dim()}};
  } else {
    throw std::invalid_argument("checkpoint: unknown realization");
  }
  j["seed"] = seed;
  j["step"] = step;
  return j;
}

void write_checkpoint(const std::string& path, nlohmann::json header,
                      const std::vector<Block>& blocks) {
  std::string payload;
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& b : blocks) {
    dir.push_back({b.name, b.values.size()});
    for (double x : b.values) append_f64(payload, x);
  }
  header["blocks"] = dir;
  char checksum[17];
  std::snprintf(checksum, sizeof checksum, "%016llx",
                static_cast<unsigned long long>(fnv1a64(payload)));
  header["checksum"] = checksum;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out << kMagic << '\n' << header.dump() << '\n' << payload;
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

struct Loaded {
  nlohmann::json header;
  std::vector<Block> blocks;
};

Loaded read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != kMagic)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  if (!std::getline(in, header_line)) throw std::runtime_error("checkpoint: missing header in " + path);
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Loaded result;
  result.header = nlohmann::json::parse(header_line);
  if (result.header.value("version", 0) != 1)
    throw std::runtime_error("checkpoint: unsupported version in " + path);

  std::size_t expected = 0;
  for (const auto& entry : result.header.at("blocks"))
    expected += entry.at(1).get<std::size_t>() * 8;
  if (payload.size() != expected)
    throw std::runtime_error("checkpoint: truncated or oversized payload in " + path + " (" +
                             std::to_string(payload.size()) + " bytes, expected " +
                             std::to_string(expected) + ")");
  char checksum[17];
  std::snprintf(checksum, sizeof checksum, "%016llx",
                static_cast<unsigned long long>(fnv1a64(payload)));
  if (result.header.at("checksum").get<std::string>() != checksum)
    throw std::runtime_error("checkpoint: checksum mismatch in " + path);

  std::size_t offset = 0;
  for (const auto& entry : result.header.at("blocks")) {
    Block b;
    b.name = entry.at(0).get<std::string>();
    const std::size_t count = entry.at(1).get<std::size_t>();
    b.values.resize(count);
    for (std::size_t i = 0; i < count; ++i, offset += 8) b.values[i] = read_f64(payload, offset);
    result.blocks.push_back(std::move(b));
  }
  return result;
}

const Block& find_block(const Loaded& l, const std::string& name) {
  for (const auto& b : l.blocks)
    if (b.name == name) return b;
  throw std::runtime_error("checkpoint: missing block " + name);
}

std::unique_ptr<ArModel> build_model(const nlohmann::json& header, const Block& params) {
  const std::string realization = header.at("realization").get<std::string>();
  const int v = header.at("V").get<int>();
  const int k = header.at("K").get<int>();
  std::unique_ptr<ArModel> model;
  if (realization == "tabular") {
    model = std::make_unique<TabularModel>(v, k, header.at("dims").at("order").get<int>());
  } else if (realization == "recurrent") {
    model = std::make_unique<RecurrentModel>(v, k, header.at("dims").at("embed").get<int>(),
                                             header.at("dims").at("hidden").get<int>(), 0);
  } else {
    throw std::runtime_error("checkpoint: unknown realization " + realization);
  }
  if (params.values.size() != model->param_count())
    throw std::runtime_error("checkpoint: parameter block has " +
                             std::to_string(params.values.size()) + " values, model needs " +
                             std::to_string(model->param_count()));
  std::copy(params.values.begin(), params.values.end(), model->params().begin());
  return model;
}

}  // namespace

void save_model_checkpoint(const ArModel& model, const std::string& path, std::uint64_t seed,
                           std::int64_t step) {
  std::vector<Block> blocks;
  blocks.push_back({"params", {model.params().begin(), model.params().end()}});
  write_checkpoint(path, model_header(model, seed, step), blocks);
}

std::unique_ptr<ArModel> load_model_checkpoint(const std::string& path) {
  const Loaded l = read_checkpoint(path);
  return build_model(l.header, find_block(l, "params"));
}

void save_train_checkpoint(const ArModel& model, const TrainCheckpointData& state,
                           const std::string& path, std::uint64_t seed) {
  nlohmann::json header = model_header(model, seed, state.adam_t);
  header["train"] = {{"next_epoch", state.next_epoch},
                     {"adam_t", state.adam_t},
                     {"best_valid_ce", encode_double(state.best_valid_ce)},
                     {"best_epoch", state.best_epoch},
                     {"epochs_since_best", state.epochs_since_best},
                     {"initial_valid_ce", encode_double(state.initial_valid_ce)}};
  std::vector<Block> blocks;
  blocks.push_back({"params", {model.params().begin(), model.params().end()}});
  blocks.push_back({"best_params", state.best_params});
  blocks.push_back({"adam_m", state.adam_m});
  blocks.push_back({"adam_v", state.adam_v});
  blocks.push_back({"ema_log", state.ema_log});
  Block init;
  init.name = "ema_init";
  init.values.assign(state.ema_init.begin(), state.ema_init.end());
  blocks.push_back(std::move(init));
  write_checkpoint(path, std::move(header), blocks);
}

LoadedTrainCheckpoint load_train_checkpoint(const std::string& path) {
  const Loaded l = read_checkpoint(path);
  LoadedTrainCheckpoint out;
  out.model = build_model(l.header, find_block(l, "params"));
  const auto& t = l.header.at("train");
  out.state.next_epoch = t.at("next_epoch").get<int>();
  out.state.adam_t = t.at("adam_t").get<std::int64_t>();
  out.state.best_valid_ce = decode_double(t.at("best_valid_ce"));
  out.state.best_epoch = t.at("best_epoch").get<int>();
  out.state.epochs_since_best = t.at("epochs_since_best").get<int>();
  out.state.initial_valid_ce = decode_double(t.at("initial_valid_ce"));
  out.state.best_params = find_block(l, "best_params").values;
  out.state.adam_m = find_block(l, "adam_m").values;
  out.state.adam_v = find_block(l, "adam_v").values;
  out.state.ema_log = find_block(l, "ema_log").values;
  const auto& init = find_block(l, "ema_init").values;
  out.state.ema_init.assign(init.size(), 0);
  for (std::size_t i = 0; i < init.size(); ++i)
    out.state.ema_init[i] = init[i] != 0.0 ? 1 : 0;
  return out;
}

}  // namespace earm
