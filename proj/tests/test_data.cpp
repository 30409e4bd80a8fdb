#include <cstring>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "cfair.hpp"

using namespace cfair;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cfair_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

std::uint32_t le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 | static_cast<std::uint32_t>(p[2]) << 16 |
         static_cast<std::uint32_t>(p[3]) << 24;
}

void put_le32(std::uint8_t* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

void reseal(std::vector<std::uint8_t>& b) { put_le32(b.data() + b.size() - 4, crc32_of(b.data(), b.size() - 4)); }

TransformerLM<float> random_model(SplitMix64& rng) {
  const std::size_t heads = 1 + rng.below(3);
  ModelConfig c{.vocab_size = 2 + rng.below(30), .d_model = heads * (1 + rng.below(4)), .n_heads = heads,
                .n_blocks = 1 + rng.below(3), .d_ff = rng.below(2) ? 0 : 1 + rng.below(9), .max_seq_len = 1 + rng.below(9),
                .seed = rng.next()};
  auto m = init_model<float>(c, 1.0);
  for (auto& [n, t] : m.params)
    for (auto& x : t.data) x = static_cast<float>(rng.normal());
  for (auto& g : m.gates.data) g = rng.uniform() < 0.2 ? 0.0f : 1.0f;
  return m;
}

}  // namespace

TEST(Tokenizer, EncodingRule) {
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(detokenize(std::vector<int>{}), "");
  EXPECT_EQ(tokenize("ab"), (std::vector<int>{98, 99}));
  EXPECT_EQ(detokenize(std::vector<int>{98, 99}), "ab");
  EXPECT_THROW(detokenize(std::vector<int>{-1}), std::out_of_range);
}

TEST(Tokenizer, RandomBytesRoundTrip) {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::string s(1024, '\0');
    for (auto& ch : s) ch = static_cast<char>(rng.below(256));
    const auto ids = tokenize(s);
    for (int id : ids) ASSERT_TRUE(id >= 1 && id < 257);
    EXPECT_EQ(detokenize(ids), s);
  }
}

TEST(SampleFraction, RoundRuleAndOrder) {
  std::vector<int> corpus(10000 * 8);
  for (std::size_t i = 0; i < corpus.size(); ++i) corpus[i] = static_cast<int>(i);
  CorpusSample info;
  const auto s = sample_fraction(std::span<const int>(corpus), 0.01, 42, 8, &info);
  EXPECT_EQ(info.windows_total, 10000u);
  EXPECT_EQ(info.windows_selected, 100u);
  ASSERT_EQ(s.size(), 800u);
  EXPECT_EQ(info.token_count, 800u);
  for (std::size_t w = 0; w < 100; ++w) {
    EXPECT_EQ(s[w * 8] % 8, 0);
    for (std::size_t k = 1; k < 8; ++k) EXPECT_EQ(s[w * 8 + k], s[w * 8] + static_cast<int>(k));
    if (w) { EXPECT_GT(s[w * 8], s[(w - 1) * 8]); }
  }
  EXPECT_EQ(sample_fraction(std::span<const int>(corpus), 0.01, 42, 8), s);
  EXPECT_NE(sample_fraction(std::span<const int>(corpus), 0.01, 43, 8), s);
}

TEST(SampleFraction, FullAndInvalid) {
  std::vector<int> corpus{1, 2, 3, 4, 5, 6, 7};
  EXPECT_EQ(sample_fraction(std::span<const int>(corpus), 1.0, 0, 3), corpus);
  EXPECT_THROW(sample_fraction(std::span<const int>(corpus), 0.0, 0, 3), std::invalid_argument);
  EXPECT_THROW(sample_fraction(std::span<const int>(corpus), 1.5, 0, 3), std::invalid_argument);
  EXPECT_THROW(sample_fraction(std::span<const int>(corpus), 0.5, 0, 0), std::invalid_argument);
}

TEST(Checkpoint, ByteLayout) {
  SplitMix64 rng(2);
  const auto m = random_model(rng);
  const auto b = serialize_checkpoint(m);
  ASSERT_EQ(std::memcmp(b.data(), "SFCK", 4), 0);
  EXPECT_EQ(le32(b.data() + 4), kCheckpointVersion);
  const std::uint32_t cfg_len = le32(b.data() + 8);
  const std::string cfg(reinterpret_cast<const char*>(b.data() + 12), cfg_len);
  EXPECT_EQ(config_from_text(cfg), m.config);
  EXPECT_EQ(le32(b.data() + b.size() - 4), crc32_of(b.data(), b.size() - 4));
  // zlib's crc32 is the standard reflected polynomial
  const char* check = "123456789";
  EXPECT_EQ(crc32_of(reinterpret_cast<const std::uint8_t*>(check), 9), 0xCBF43926u);
  // payload size: header + per tensor (name, rank, dims, data) + crc
  std::size_t expect = 12 + cfg_len + 4 + 4;
  auto add = [&](const std::string& name, const Tensor<float>& t) { expect += 4 + name.size() + 4 + 8 * t.rank() + 4 * t.size(); };
  for (const auto& [n, t] : m.params) add(n, t);
  add("gates", m.gates);
  EXPECT_EQ(b.size(), expect);
}

TEST(Checkpoint, RoundTripsBitwise) {
  SplitMix64 rng(3);
  const auto dir = scratch("rt");
  for (int trial = 0; trial < 100; ++trial) {
    auto m = random_model(rng);
    if (trial % 3 == 0) m = compact(m);
    const auto path = dir / "m.ckpt";
    save_checkpoint(m, path);
    const auto back = load_checkpoint<float>(path);
    ASSERT_EQ(back.config, m.config);
    ASSERT_EQ(back.params, m.params);
    ASSERT_EQ(back.gates, m.gates);
    ASSERT_EQ(back.block_heads, m.block_heads);
    ASSERT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
  }
  EXPECT_FALSE(fs::exists(dir / "m.ckpt.tmp"));
}

TEST(Checkpoint, AnySingleByteFlipRejected) {
  SplitMix64 rng(4);
  const auto m = random_model(rng);
  const auto good = serialize_checkpoint(m);
  for (std::size_t i = 0; i < good.size(); ++i) {
    auto b = good;
    b[i] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    EXPECT_THROW(deserialize_checkpoint<float>(b.data(), b.size()), DataError) << "offset " << i;
  }
  auto b = good;
  b[good.size() / 2] ^= 0x10;
  try {
    deserialize_checkpoint<float>(b.data(), b.size());
    FAIL();
  } catch (const ChecksumError& e) {
    EXPECT_EQ(e.offset(), good.size() - 4);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
}

TEST(Checkpoint, MagicVersionAndStructure) {
  SplitMix64 rng(5);
  const auto m = random_model(rng);
  auto b = serialize_checkpoint(m);
  auto bad_magic = b;
  bad_magic[0] = 'X';
  reseal(bad_magic);
  EXPECT_THROW(deserialize_checkpoint<float>(bad_magic.data(), bad_magic.size()), DataError);
  auto v2 = b;
  put_le32(v2.data() + 4, 2);
  reseal(v2);
  EXPECT_THROW(deserialize_checkpoint<float>(v2.data(), v2.size()), VersionError);
  // Truncated files
  for (std::size_t n : {0ul, 3ul, 8ul, 20ul, b.size() - 1}) {
    std::vector<std::uint8_t> t(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(deserialize_checkpoint<float>(t.data(), t.size()), DataError) << n;
  }
  // A well-sealed file whose tensors disagree with its config
  auto other = m;
  other.params.erase("lnf.b");
  auto missing = serialize_checkpoint(other);
  EXPECT_THROW(deserialize_checkpoint<float>(missing.data(), missing.size()), SchemaError);
  other = m;
  other.param("wte") = Tensor<float>({1, 1});
  auto shaped = serialize_checkpoint(other);
  EXPECT_THROW(deserialize_checkpoint<float>(shaped.data(), shaped.size()), SchemaError);
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/dir/x.ckpt"), DataError);
}

TEST(Checkpoint, RandomBytesNeverCrash) {
  SplitMix64 rng(6);
  const auto good = serialize_checkpoint(random_model(rng));
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<std::uint8_t> b;
    if (trial % 2) {
      b.resize(rng.below(200));
      for (auto& x : b) x = static_cast<std::uint8_t>(rng.below(256));
      if (b.size() >= 4 && trial % 4 == 1) std::memcpy(b.data(), "SFCK", 4);
    } else {
      // Structured corruption with a valid CRC so the parser itself is exercised.
      b = good;
      const std::size_t k = 1 + rng.below(4);
      for (std::size_t j = 0; j < k; ++j) b[4 + rng.below(b.size() - 8)] = static_cast<std::uint8_t>(rng.below(256));
      b.resize(b.size() - 4 - rng.below(std::min<std::size_t>(b.size() - 8, 16)));
      b.resize(b.size() + 4);
      reseal(b);
    }
    try {
      deserialize_checkpoint<float>(b.data(), b.size());
    } catch (const DataError&) {
    }
  }
  SUCCEED();
}

TEST(Checkpoint, ConfigTextRoundTrip) {
  SplitMix64 rng(7);
  for (int i = 0; i < 50; ++i) {
    const auto m = random_model(rng);
    EXPECT_EQ(config_from_text(to_text(m.config)), m.config);
  }
}

TEST(Loaders, EmptyAndLenient) {
  const auto dir = scratch("loaders");
  write_text(dir / "empty.jsonl", "");
  EXPECT_TRUE(load_prompt_file(dir / "empty.jsonl").records.empty());
  write_text(dir / "p.jsonl",
             "{\"id\":\"a\",\"text\":\"hello there\",\"source_toxicity_score\":0.2}\n"
             "{\"id\":\"b\",\"text\":\"broken\"\n"
             "\n"
             "{\"id\":\"c\",\"text\":\"fine again\",\"source_label\":\"toxic\"}\r\n");
  const auto r = load_prompt_file(dir / "p.jsonl", LoadMode::lenient);
  EXPECT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.skipped, 1u);
  ASSERT_EQ(r.issues.size(), 1u);
  EXPECT_EQ(r.issues[0].line, 2u);
  EXPECT_EQ(r.records[1].source_label, ToxicLabel::toxic);
  try {
    load_prompt_file(dir / "p.jsonl");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Loaders, SchemaErrorsNameTheField) {
  const auto dir = scratch("schema");
  const std::vector<std::pair<std::string, std::string>> cases{
      {"{\"text\":\"no id\"}", "id"},
      {"{\"id\":\"x\"}", "text"},
      {"{\"id\":\"x\",\"text\":\"t\",\"source_toxicity_score\":1.5}", "source_toxicity_score"},
      {"{\"id\":\"x\",\"text\":\"t\",\"source_label\":\"meh\"}", "source_label"},
      {"{\"id\":\"x\",\"text\":\"\"}", "text"},
  };
  for (const auto& [line, field] : cases) {
    write_text(dir / "s.jsonl", line + "\n");
    try {
      load_prompt_file(dir / "s.jsonl");
      FAIL() << line;
    } catch (const SchemaError& e) {
      EXPECT_EQ(e.field(), field) << line;
    }
  }
  write_text(dir / "t.jsonl", "{\"stereotype\":\"a.\",\"anti_stereotype\":\"b.\"}\n");
  try {
    load_triples(dir / "t.jsonl");
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.field(), "unrelated");
  }
}

TEST(Loaders, PairDiffIndex) {
  const auto dir = scratch("pairs");
  write_text(dir / "ok.jsonl",
             "{\"stereotype\":\"the nurse said she was tired.\",\"anti_stereotype\":\"the nurse said he was tired.\"}\n"
             "{\"stereotype\":\"He told her.\",\"anti_stereotype\":\"She told him.\"}\n");
  EXPECT_EQ(load_pairs(dir / "ok.jsonl").records.size(), 2u);
  write_text(dir / "bad.jsonl",
             "{\"stereotype\":\"the nurse said she was tired.\",\"anti_stereotype\":\"the nurse said he was sleepy.\"}\n");
  try {
    load_pairs(dir / "bad.jsonl");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.position(), 5u);
  }
  EXPECT_EQ(pair_violation({"", "a b c", "a b c d", ""}), std::optional<std::size_t>(3));
  EXPECT_EQ(pair_violation({"", "same he", "same he", ""}), std::optional<std::size_t>(0));
  EXPECT_EQ(pair_violation({"", "he said.", "(she) said.", ""}), std::optional<std::size_t>(0));
}

TEST(Loaders, RoundTripAndFuzz) {
  const auto dir = scratch("fuzz");
  const auto prompts = synth::prompt_records(50, 1);
  write_jsonl(dir / "p.jsonl", prompts);
  const auto back = load_prompt_file(dir / "p.jsonl").records;
  ASSERT_EQ(back.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(back[i].id, prompts[i].id);
    EXPECT_EQ(back[i].text, prompts[i].text);
    EXPECT_EQ(back[i].source_toxicity_score, prompts[i].source_toxicity_score);
    EXPECT_EQ(back[i].continuation_toxicity, prompts[i].continuation_toxicity);
  }
  const auto pairs = synth::pronoun_pairs(30, 2);
  write_jsonl(dir / "pairs.jsonl", pairs);
  for (const auto& p : load_pairs(dir / "pairs.jsonl").records) EXPECT_FALSE(pair_violation(p).has_value());

  SplitMix64 rng(9);
  const std::string alphabet = "{}[]\":,0123456789.eE-+ abcxyz\\\n\r\t\x01\xc3\xa9\xff";
  for (int trial = 0; trial < 500; ++trial) {
    std::string s(rng.below(120), ' ');
    for (auto& ch : s) ch = alphabet[rng.below(alphabet.size())];
    if (trial % 3 == 0) s = "{\"id\":\"q\",\"text\":\"" + s + "\"}\n" + s;
    write_text(dir / "f.jsonl", s);
    for (auto mode : {LoadMode::strict, LoadMode::lenient}) {
      try {
        const auto r = load_prompt_file(dir / "f.jsonl", mode);
        for (const auto& x : r.records) EXPECT_FALSE(x.text.empty());
        load_triples(dir / "f.jsonl", mode);
        load_pairs(dir / "f.jsonl", mode);
      } catch (const DataError&) {
      }
    }
  }
}
