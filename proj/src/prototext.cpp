#include "mpamatch/prototext.hpp"

#include <fstream>
#include <random>

#include "mpamatch/errors.hpp"
#include "mpamatch/hashing.hpp"
#include "mpamatch/random.hpp"

namespace mpamatch::prototext {

namespace F = torch::nn::functional;

Provenance provenance_from_tag(const std::string& tag) {
  if (tag == "P-nonsim") return Provenance::p_nonsim;
  if (tag == "P-simL") return Provenance::p_siml;
  if (tag == "P-simLD") return Provenance::p_simld;
  if (tag == "T-nonsim") return Provenance::t_nonsim;
  return Provenance::custom;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::p_nonsim: return "P-nonsim";
    case Provenance::p_siml: return "P-simL";
    case Provenance::p_simld: return "P-simLD";
    case Provenance::t_nonsim: return "T-nonsim";
    case Provenance::custom: break;
  }
  return "custom";
}

std::vector<ClassPromptSet> load_prompt_sets(const std::filesystem::path& root, const std::string& tag,
                                             const std::vector<std::string>& class_names, int per_class) {
  if (per_class < 1) throw ConfigError("prompt sets need K >= 1");
  std::vector<ClassPromptSet> sets;
  for (const auto& name : class_names) {
    const auto path = root / tag / (name + ".txt");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("missing prompt file " + path.string());
    ClassPromptSet set;
    set.class_name = name;
    set.tag = tag;
    set.provenance = provenance_from_tag(tag);
    set.content_hash = sha256_file(path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) {
        if (in.peek() == std::char_traits<char>::eof()) break;  // trailing blank line
        throw ConfigError(path.string() + ": empty description line");
      }
      set.descriptions.push_back(line);
    }
    if (static_cast<int>(set.descriptions.size()) != per_class)
      throw ConfigError(path.string() + ": expected " + std::to_string(per_class) + " descriptions, found " +
                        std::to_string(set.descriptions.size()));
    sets.push_back(std::move(set));
  }
  return sets;
}

nlohmann::json prompt_metadata(const std::vector<ClassPromptSet>& sets) {
  nlohmann::json files = nlohmann::json::object();
  for (const auto& s : sets) files[s.class_name] = s.content_hash;
  nlohmann::json out{{"files", files}};
  if (!sets.empty()) {
    out["tag"] = sets.front().tag;
    out["provenance"] = to_string(sets.front().provenance);
    out["K"] = sets.front().descriptions.size();
  }
  return out;
}

StubTextEncoder::StubTextEncoder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 1) throw ConfigError("text embedding dimension must be >= 1");
}

torch::Tensor StubTextEncoder::embed(const std::string& text) const {
  std::mt19937_64 rng(sha256_u64(std::to_string(seed_) + '\x1f' + text));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto v = torch::empty({dim_}, torch::kDouble);
  auto acc = v.accessor<double, 1>();
  for (int i = 0; i < dim_; ++i) acc[i] = normal(rng);
  return v / v.norm();
}

TableTextEncoder::TableTextEncoder(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("text embedding table not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    dim_ = j.at("dim").get<int>();
    for (const auto& [text, vec] : j.at("embeddings").items()) {
      auto values = vec.get<std::vector<double>>();
      if (static_cast<int>(values.size()) != dim_)
        throw ConfigError("embedding for '" + text + "' has wrong width in " + path.string());
      table_.emplace(text, std::move(values));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed text embedding table " + path.string() + ": " + e.what());
  }
}

torch::Tensor TableTextEncoder::embed(const std::string& text) const {
  auto it = table_.find(text);
  if (it == table_.end()) throw ConfigError("text encoder has no embedding for description '" + text + "'");
  return torch::tensor(it->second, torch::kDouble);
}

torch::Tensor embed_descriptions(const std::vector<ClassPromptSet>& prompts, const TextEncoder& encoder) {
  if (prompts.empty()) throw ConfigError("no prompt sets given");
  const auto K = prompts.front().descriptions.size();
  std::vector<torch::Tensor> classes;
  for (const auto& set : prompts) {
    if (set.descriptions.size() != K) throw ShapeError("prompt sets differ in description count");
    std::vector<torch::Tensor> rows;
    for (const auto& text : set.descriptions) {
      auto e = encoder.embed(text).to(torch::kDouble);
      if (e.dim() != 1 || e.size(0) != encoder.dim()) throw ConfigError("text encoder returned a malformed embedding");
      if (!torch::isfinite(e).all().item<bool>()) throw ConfigError("text encoder returned non-finite values");
      rows.push_back(e / e.norm().clamp_min(1e-12));
    }
    classes.push_back(torch::stack(rows));
  }
  return torch::stack(classes);
}

torch::Tensor fuse_tokens(const torch::Tensor& base, const torch::Tensor& tokens) {
  if (base.dim() != 3 || tokens.dim() != 4 || tokens.size(0) != base.size(0) || tokens.size(1) != base.size(1) ||
      tokens.size(3) != base.size(2))
    throw ShapeError("fuse_tokens: expected base [C,K,d] and tokens [C,K,L,d]");
  if (tokens.size(2) == 0) return base;
  return torch::cat({base.unsqueeze(2), tokens.to(base.scalar_type())}, 2).mean(2);
}

torch::Tensor project_text(const torch::Tensor& fused, torch::nn::Linear& projection,
                           protovis::SimilarityMode mode) {
  if (fused.dim() != 3 || fused.size(2) != projection->options.in_features())
    throw ShapeError("project_text: fused prototypes do not match the projection input width");
  auto out = projection->forward(fused.to(projection->weight.scalar_type()));
  if (mode == protovis::SimilarityMode::cosine) out = F::normalize(out, F::NormalizeFuncOptions().dim(2));
  return out;
}

TextPrototypesImpl::TextPrototypesImpl(torch::Tensor base_embeddings, TextPrototypeOptions options)
    : options_(options) {
  if (base_embeddings.dim() != 3) throw ShapeError("text prototypes expect base embeddings [C,K,d]");
  if (options.tokens < 0) throw ConfigError("cooperative token count must be >= 0");
  const auto C = base_embeddings.size(0), K = base_embeddings.size(1), d = base_embeddings.size(2);
  auto base = base_embeddings.detach().to(torch::kFloat).clone();
  if (options.train_base) {
    base_ = register_parameter("base", base);
  } else {
    base_ = register_buffer("base", base);
  }
  auto gen = make_generator(derive_seed(options.seed, {0x7e47}));
  auto tokens = torch::empty({C, K, options.tokens, d});
  if (tokens.numel() > 0) trunc_normal_(tokens, options.token_std, gen);
  tokens_ = register_parameter("tokens", tokens, options.tokens > 0);
  projection_ = register_module("projection", torch::nn::Linear(torch::nn::LinearOptions(d, options.visual_dim).bias(false)));
  {
    torch::NoGradGuard no_grad;
    trunc_normal_(projection_->weight, 0.02, gen);
    if (d == options.visual_dim) projection_->weight.add_(torch::eye(d));
  }
}

torch::Tensor TextPrototypesImpl::fused() const { return fuse_tokens(base_, tokens_); }

torch::Tensor TextPrototypesImpl::forward() { return project_text(fused(), projection_, options_.mode); }

}  // namespace mpamatch::prototext
