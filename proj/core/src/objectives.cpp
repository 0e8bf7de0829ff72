#include "coavt/objectives.hpp"

#include <cmath>
#include <numeric>

#include <json.hpp>

namespace coavt::objectives {

namespace diff = coavt::diff;

ProjectionHead ProjectionHead::make(model::Initializer& init, std::size_t hidden, std::size_t proj_dim) {
  return {model::Linear::make(init, hidden, proj_dim), model::Linear::make(init, hidden, proj_dim)};
}

Tensor ProjectionHead::project_queries(const Tensor& queries) const { return diff::l2_normalize(query(queries)); }
Tensor ProjectionHead::project_text(const Tensor& cls) const { return diff::l2_normalize(text(cls)); }

ContrastiveHead ContrastiveHead::make(double tau_init) { return {Tensor::scalar(std::log(tau_init), true)}; }
double ContrastiveHead::tau() const { return std::exp(log_tau.item()); }

MatchingHead MatchingHead::make(model::Initializer& init, std::size_t hidden) { return {model::Linear::make(init, hidden, 2)}; }
Tensor MatchingHead::logits(const Tensor& queries) const { return classifier(queries); }

PretrainHeads PretrainHeads::make(const model::ModelConfig& cfg, std::uint64_t seed) {
  model::Initializer init(seed, cfg.init_std);
  PretrainHeads h;
  h.projection = ProjectionHead::make(init, cfg.hidden, cfg.proj_dim);
  h.contrastive = ContrastiveHead::make(cfg.tau_init);
  h.matching = MatchingHead::make(init, cfg.hidden);
  return h;
}

void PretrainHeads::collect(model::ParameterList& out) const {
  projection.query.collect(out, "heads.proj_query");
  projection.text.collect(out, "heads.proj_text");
  out.push_back({"heads.log_tau", contrastive.log_tau, false});
  matching.classifier.collect(out, "heads.match");
}

// ---------------------------------------------------------------------------

Tensor similarity_matrix(const model::QueryBlockOutput& qx, const Tensor& t_cls, const ProjectionHead& head) {
  const Tensor q = head.project_queries(qx.outputs);
  const Tensor t = head.project_text(t_cls.rank() == 1 ? diff::reshape(t_cls, {1, t_cls.numel()}) : t_cls);
  static constexpr std::size_t kAxes[] = {0, 2, 1};
  // (Bx, Nq, Bt) -> (Bx, Bt, Nq) -> max over queries
  return diff::max_reduce(diff::permute(diff::matmul(q, t, diff::Transpose::kRhs), kAxes));
}

double similarity(const model::QueryBlockOutput& qx, const Tensor& t_cls, const ProjectionHead& head) {
  if (qx.outputs.extent(0) != 1) throw ContractError("similarity: expects a single query block");
  return similarity_matrix(qx, t_cls, head).item();
}

namespace {

ContrastiveTerms contrastive_from_logits(const Tensor& logits) {
  if (logits.rank() != 2 || logits.extent(0) != logits.extent(1))
    throw ShapeError("contrastive_loss: similarity matrix must be square, got " + diff::to_string(logits.shape()));
  std::vector<std::size_t> diag(logits.extent(0));
  std::iota(diag.begin(), diag.end(), 0);
  static constexpr std::size_t kTranspose[] = {1, 0};
  ContrastiveTerms t;
  t.x_to_text = diff::cross_entropy(logits, diag);
  t.text_to_x = diff::cross_entropy(diff::permute(logits, kTranspose), diag);
  t.loss = diff::scale(diff::add(t.x_to_text, t.text_to_x), 0.5);
  return t;
}

}  // namespace

ContrastiveTerms contrastive_loss(const Tensor& sim, const ContrastiveHead& head) {
  const Tensor inv_tau = diff::exp(diff::scale(head.log_tau, -1.0));
  return contrastive_from_logits(diff::scale(sim, inv_tau));
}

ContrastiveTerms contrastive_loss(const Tensor& sim, double tau) {
  if (!(tau > 0.0)) throw ContractError("contrastive_loss: tau must be positive");
  return contrastive_from_logits(diff::scale(sim, 1.0 / tau));
}

Tensor matching_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 3 || logits.extent(2) != 2)
    throw ShapeError("matching_loss: logits must be (N, N_q, 2), got " + diff::to_string(logits.shape()));
  const std::size_t n = logits.extent(0);
  const std::size_t nq = logits.extent(1);
  if (labels.size() != n) throw ShapeError("matching_loss: one label per row required");
  std::vector<std::size_t> targets;
  targets.reserve(n * nq);
  for (std::size_t y : labels) {
    if (y > 1) throw ContractError("matching_loss: label must be 0 or 1");
    targets.insert(targets.end(), nq, y);
  }
  return diff::cross_entropy(diff::reshape(logits, {n * nq, 2}), targets);
}

Tensor matching_loss(const model::QueryBlockOutput& match_out, const MatchingHead& head,
                     std::span<const std::size_t> labels) {
  return matching_loss(head.logits(match_out.outputs), labels);
}

std::vector<double> matching_scores(const model::QueryBlockOutput& match_out, const MatchingHead& head) {
  diff::NoGradGuard guard;
  const Tensor probs = diff::softmax(head.logits(match_out.outputs));
  const std::size_t n = probs.extent(0);
  const std::size_t nq = probs.extent(1);
  std::vector<double> scores(n, 0.0);
  const auto p = probs.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t q = 0; q < nq; ++q) scores[i] += p[(i * nq + q) * 2 + 1];
    scores[i] /= static_cast<double>(nq);
  }
  return scores;
}

LmInputs make_lm_inputs(const data::TokenBatch& captions) {
  if (captions.length < 2) throw ContractError("lm inputs: captions need at least two tokens");
  const std::size_t len = captions.length - 1;
  LmInputs out;
  out.decoder_input.batch = captions.batch;
  out.decoder_input.length = len;
  out.decoder_input.ids.resize(captions.batch * len);
  out.targets.resize(captions.batch * len);
  for (std::size_t b = 0; b < captions.batch; ++b) {
    const std::size_t* row = captions.ids.data() + b * captions.length;
    if (row[0] != data::tokens::kCls) throw ContractError("lm inputs: caption must start with [CLS]");
    out.decoder_input.ids[b * len] = data::tokens::kBos;
    for (std::size_t j = 1; j < len; ++j) out.decoder_input.ids[b * len + j] = row[j];
    for (std::size_t j = 0; j < len; ++j) out.targets[b * len + j] = row[j + 1];
  }
  return out;
}

Tensor lm_loss(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.rank() < 2) throw ShapeError("lm_loss: logits must be (B, L, V)");
  const std::size_t v = logits.extent(-1);
  const std::size_t rows = logits.numel() / v;
  if (targets.size() != rows)
    throw ShapeError("lm_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " positions after shifting");
  return diff::cross_entropy(diff::reshape(logits, {rows, v}), targets, data::tokens::kPad);
}

// ---------------------------------------------------------------------------

const PairTerms& LossReport::pair(Condition c) const {
  switch (c) {
    case Condition::kA: return a;
    case Condition::kV: return v;
    case Condition::kAV: return av;
  }
  return av;
}

PairTerms& LossReport::pair(Condition c) { return const_cast<PairTerms&>(std::as_const(*this).pair(c)); }

double LossReport::sum_of_terms() const { return av.total() + a.total() + v.total(); }

std::string LossReport::to_json() const {
  auto terms = [](const PairTerms& t) {
    return nlohmann::json{{"xtc", t.xtc}, {"xtm", t.xtm}, {"xlm", t.xlm}, {"l", t.total()}};
  };
  nlohmann::json j{{"step", step}, {"l_total", total}, {"av", terms(av)}, {"a", terms(a)}, {"v", terms(v)},
                   {"tau", tau}};
  return j.dump();
}

LossReport LossReport::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  auto terms = [](const nlohmann::json& t) {
    return PairTerms{t.at("xtc").get<double>(), t.at("xtm").get<double>(), t.at("xlm").get<double>()};
  };
  LossReport r;
  r.step = j.at("step").get<std::size_t>();
  r.total = j.at("l_total").get<double>();
  r.av = terms(j.at("av"));
  r.a = terms(j.at("a"));
  r.v = terms(j.at("v"));
  r.tau = j.at("tau").get<double>();
  return r;
}

NegativeSample sample_negatives(std::size_t batch, std::mt19937_64& rng) {
  NegativeSample s;
  if (batch < 2) return s;
  std::uniform_int_distribution<std::size_t> other(0, batch - 2);
  auto draw = [&](std::size_t i) {
    const std::size_t j = other(rng);
    return j >= i ? j + 1 : j;
  };
  for (std::size_t i = 0; i < batch; ++i) s.text.push_back(draw(i));
  for (std::size_t i = 0; i < batch; ++i) s.cond.push_back(draw(i));
  return s;
}

PairTerms PairLoss::terms() const {
  return {xtc.item(), xtm.defined() ? xtm.item() : 0.0, xlm.defined() ? xlm.item() : 0.0};
}

EncodedBatch encode_batch(const model::Encoders& enc, const Batch& batch) {
  if (batch.size() < 1) throw ContractError("total_loss: empty batch");
  const auto ea = enc.encode_audio(batch.audio);
  const auto ev = enc.encode_visual(batch.visual);
  return {enc.joint_forward(ea, ev), enc.encode_text(batch.captions), batch.captions, make_lm_inputs(batch.captions)};
}

PairLoss pair_loss(Condition pair, const model::Encoders& enc, const PretrainHeads& heads, const EncodedBatch& encoded,
                   const NegativeSample& negatives, const LossOptions& options) {
  const auto& cond = encoded.joint.of(pair);
  const std::size_t batch = cond.batch();
  PairLoss out;

  const auto extracted = enc.query_forward(cond, model::QueryMode::kExtract);
  const Tensor sim = similarity_matrix(extracted.queries, encoded.text.cls, heads.projection);
  out.xtc = contrastive_loss(sim, heads.contrastive).loss;
  out.total = out.xtc;

  if (options.matching) {
    std::vector<std::size_t> cond_rows(batch);
    std::iota(cond_rows.begin(), cond_rows.end(), 0);
    std::vector<std::size_t> text_rows = cond_rows;
    std::vector<std::size_t> labels(batch, 1);
    if (!negatives.text.empty()) {
      // (cond_i, text_neg) then (cond_neg, text_i)
      for (std::size_t i = 0; i < batch; ++i) {
        cond_rows.push_back(i);
        text_rows.push_back(negatives.text[i]);
      }
      for (std::size_t i = 0; i < batch; ++i) {
        cond_rows.push_back(negatives.cond[i]);
        text_rows.push_back(i);
      }
      labels.resize(3 * batch, 0);
    }
    const auto& captions = encoded.captions;
    data::TokenBatch texts{text_rows.size(), captions.length, {}};
    texts.ids.reserve(text_rows.size() * captions.length);
    for (std::size_t r : text_rows)
      texts.ids.insert(texts.ids.end(), captions.ids.begin() + static_cast<std::ptrdiff_t>(r * captions.length),
                       captions.ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * captions.length));
    const model::EmbeddingSequence conds{diff::gather_batch(cond.vectors, cond_rows), cond.provenance};
    const auto matched = enc.query_forward(conds, model::QueryMode::kMatch, &texts);
    out.xtm = matching_loss(matched.queries, heads.matching, labels);
    out.total = diff::add(out.total, out.xtm);
  }

  if (options.lm) {
    const auto generated = enc.query_forward(cond, model::QueryMode::kGenerate, &encoded.lm.decoder_input);
    out.xlm = lm_loss(generated.logits, encoded.lm.targets);
    out.total = diff::add(out.total, out.xlm);
  }
  return out;
}

TotalLoss total_loss(const model::Encoders& enc, const PretrainHeads& heads, const Batch& batch,
                     const LossOptions& options, std::mt19937_64& rng) {
  const EncodedBatch encoded = encode_batch(enc, batch);
  TotalLoss out;
  out.report.tau = heads.contrastive.tau();
  const std::array<std::pair<Condition, bool>, 3> pairs{
      {{Condition::kAV, true}, {Condition::kA, options.pair_a}, {Condition::kV, options.pair_v}}};
  for (const auto& [pair, enabled] : pairs) {
    if (!enabled) continue;
    const NegativeSample negatives = sample_negatives(batch.size(), rng);
    const PairLoss loss = pair_loss(pair, enc, heads, encoded, negatives, options);
    out.report.pair(pair) = loss.terms();
    out.total = out.total.defined() ? diff::add(out.total, loss.total) : loss.total;
  }
  out.report.total = out.total.item();
  return out;
}

}  // namespace coavt::objectives
