#include "gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

#include "coavt/dataio.hpp"
#include "coavt/model.hpp"
#include "coavt/objectives.hpp"
#include "coavt/trainer.hpp"

namespace coavt::tools {

namespace diff = coavt::diff;
using diff::Primitive;
using diff::Tensor;

namespace {

class Fixture {
 public:
  explicit Fixture(std::uint64_t seed) : rng_(seed) {}

  Tensor leaf(diff::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(diff::numel(shape));
    for (double& x : v) x = u(rng_);
    return Tensor::parameter(std::move(shape), std::move(v));
  }

  Tensor weights(const diff::Shape& shape) {
    std::normal_distribution<double> n;
    std::vector<double> v(diff::numel(shape));
    for (double& x : v) x = n(rng_);
    return Tensor::constant(shape, std::move(v));
  }

 private:
  std::mt19937_64 rng_;
};

std::string shapes_of(const std::vector<Tensor>& inputs) {
  std::string s;
  for (const auto& t : inputs) s += (s.empty() ? "" : " ") + diff::to_string(t.shape());
  return s;
}

struct PrimitiveCase {
  Primitive op;
  std::vector<Tensor> inputs;
  diff::PrimitiveAttrs attrs;
  bool softmax_readout = false;  // for outputs carrying masked logits
};

std::vector<PrimitiveCase> primitive_cases(Fixture& fx) {
  std::vector<PrimitiveCase> c;
  auto attrs_idx = [](std::vector<std::size_t> idx) {
    diff::PrimitiveAttrs a;
    a.indices = std::move(idx);
    return a;
  };
  diff::PrimitiveAttrs rhs_t;
  rhs_t.transpose = diff::Transpose::kRhs;
  c.push_back({Primitive::kMatMul, {fx.leaf({3, 4}), fx.leaf({4, 5})}, {}});
  c.push_back({Primitive::kMatMul, {fx.leaf({2, 3, 4}), fx.leaf({5, 4})}, rhs_t});
  c.push_back({Primitive::kMatMul, {fx.leaf({2, 3, 4}), fx.leaf({2, 4, 2})}, {}});
  c.push_back({Primitive::kAdd, {fx.leaf({3, 4}), fx.leaf({3, 4})}, {}});
  c.push_back({Primitive::kAdd, {fx.leaf({2, 3, 4}), fx.leaf({4})}, {}});
  diff::PrimitiveAttrs factor;
  factor.factor = -1.7;
  c.push_back({Primitive::kScale, {fx.leaf({3, 4})}, factor});
  c.push_back({Primitive::kScale, {fx.leaf({2, 3}), fx.leaf({}, 0.5, 2.0)}, {}});
  c.push_back({Primitive::kSoftmax, {fx.leaf({3, 5}, -2, 2)}, {}});
  c.push_back({Primitive::kSoftmax, {fx.leaf({2, 2, 4}, -2, 2)}, {}});
  c.push_back({Primitive::kLayerNorm, {fx.leaf({2, 4}), fx.leaf({4}), fx.leaf({4})}, {}});
  c.push_back({Primitive::kLayerNorm, {fx.leaf({2, 3, 6}), fx.leaf({6}), fx.leaf({6})}, {}});
  c.push_back({Primitive::kGelu, {fx.leaf({4, 5}, -3, 3)}, {}});
  c.push_back({Primitive::kGelu, {fx.leaf({2, 3, 2}, -3, 3)}, {}});
  {
    auto a = attrs_idx({0, 3, 3, 5});
    a.shape = {2, 2};
    c.push_back({Primitive::kEmbedding, {fx.leaf({6, 4})}, a});
    auto b = attrs_idx({1, 1, 2});
    b.shape = {3};
    c.push_back({Primitive::kEmbedding, {fx.leaf({3, 5})}, b});
  }
  c.push_back({Primitive::kConcatSeq, {fx.leaf({2, 3, 4}), fx.leaf({2, 2, 4})}, {}});
  c.push_back({Primitive::kConcatSeq, {fx.leaf({1, 4}), fx.leaf({3, 4}), fx.leaf({2, 4})}, {}});
  c.push_back({Primitive::kMeanPool, {fx.leaf({2, 3, 4})}, {}});
  c.push_back({Primitive::kMeanPool, {fx.leaf({5, 3})}, {}});
  c.push_back({Primitive::kMaxReduce, {fx.leaf({3, 5})}, {}});
  c.push_back({Primitive::kMaxReduce, {fx.leaf({2, 2, 6})}, {}});
  {
    diff::PrimitiveAttrs a;
    a.mask = {{3, 3}, {0, 1, 1, 0, 0, 1, 0, 0, 0}};
    c.push_back({Primitive::kMaskedFill, {fx.leaf({2, 3, 3})}, a, true});
    diff::PrimitiveAttrs b;
    b.mask = {{2, 2, 3}, {0, 0, 1, 0, 1, 0, 1, 0, 0, 0, 0, 0}};
    c.push_back({Primitive::kMaskedFill, {fx.leaf({2, 2, 2, 3})}, b, true});
  }
  c.push_back({Primitive::kCrossEntropy, {fx.leaf({4, 5}, -2, 2)}, attrs_idx({1, 0, 4, 2})});
  {
    auto a = attrs_idx({3, 2, 0, 2, 1, 2});
    a.ignore_index = 2;
    c.push_back({Primitive::kCrossEntropy, {fx.leaf({6, 4}, -2, 2)}, a});
  }
  c.push_back({Primitive::kSigmoid, {fx.leaf({3, 4}, -3, 3)}, {}});
  c.push_back({Primitive::kSigmoid, {fx.leaf({2, 2, 2}, -3, 3)}, {}});
  c.push_back({Primitive::kLog, {fx.leaf({3, 4}, 0.5, 3)}, {}});
  c.push_back({Primitive::kLog, {fx.leaf({5}, 0.2, 2)}, {}});
  c.push_back({Primitive::kSum, {fx.leaf({3, 4})}, {}});
  c.push_back({Primitive::kSum, {fx.leaf({2, 3, 2})}, {}});
  c.push_back({Primitive::kMul, {fx.leaf({3, 4}), fx.leaf({3, 4})}, {}});
  c.push_back({Primitive::kMul, {fx.leaf({2, 5}), fx.leaf({2, 5})}, {}});
  c.push_back({Primitive::kExp, {fx.leaf({3, 4})}, {}});
  c.push_back({Primitive::kExp, {fx.leaf({2, 2, 3})}, {}});
  c.push_back({Primitive::kL2Normalize, {fx.leaf({3, 4})}, {}});
  c.push_back({Primitive::kL2Normalize, {fx.leaf({2, 2, 5})}, {}});
  c.push_back({Primitive::kPermute, {fx.leaf({2, 3, 4})}, attrs_idx({2, 0, 1})});
  c.push_back({Primitive::kPermute, {fx.leaf({3, 5})}, attrs_idx({1, 0})});
  {
    diff::PrimitiveAttrs a;
    a.shape = {4, 3};
    c.push_back({Primitive::kReshape, {fx.leaf({2, 6})}, a});
    diff::PrimitiveAttrs b;
    b.shape = {2, 2, 2};
    c.push_back({Primitive::kReshape, {fx.leaf({8})}, b});
  }
  {
    diff::PrimitiveAttrs a;
    a.start = 1;
    a.length = 3;
    c.push_back({Primitive::kSliceSeq, {fx.leaf({2, 5, 3})}, a});
    diff::PrimitiveAttrs b;
    b.start = 0;
    b.length = 2;
    c.push_back({Primitive::kSliceSeq, {fx.leaf({4, 2})}, b});
  }
  c.push_back({Primitive::kGatherBatch, {fx.leaf({3, 2, 2})}, attrs_idx({2, 0, 2})});
  c.push_back({Primitive::kGatherBatch, {fx.leaf({4, 3})}, attrs_idx({1, 1, 3, 0})});
  return c;
}

GradcheckCase check_primitive(Fixture& fx, const PrimitiveCase& pc, const GradcheckSuiteOptions& opt) {
  const Tensor probe = diff::apply_primitive(pc.op, pc.inputs, pc.attrs);
  const Tensor w = fx.weights(probe.shape());
  auto f = [&] {
    Tensor out = diff::apply_primitive(pc.op, pc.inputs, pc.attrs);
    if (pc.softmax_readout) out = diff::softmax(out);
    return diff::sum(diff::mul(out, w));
  };
  std::vector<diff::NamedTensor> leaves;
  for (std::size_t i = 0; i < pc.inputs.size(); ++i) leaves.push_back({"input" + std::to_string(i), pc.inputs[i]});
  const auto report = diff::finite_diff_gradcheck(f, leaves, opt.eps);
  std::size_t n = 0;
  for (const auto& l : report.leaves) n += l.elements_checked;
  return {std::string(diff::primitive_name(pc.op)), shapes_of(pc.inputs), report.max_rel_error(), n};
}

GradcheckCase check_total_loss(const GradcheckSuiteOptions& opt) {
  model::ModelConfig m;
  m.hidden = 8;
  m.heads = 2;
  m.av_layers = 1;
  m.text_layers = 1;
  m.num_queries = 2;
  m.vocab_size = 16;
  m.max_text_len = 8;
  m.proj_dim = 4;
  m.audio_frames = 8;
  m.audio_bins = 8;
  m.audio_patch = 4;
  m.frame_size = 8;
  m.frame_channels = 3;
  m.visual_patch = 4;
  m.init_std = opt.init_std;
  m.tau_init = 0.5;

  data::CorpusConfig c;
  c.n_train = 2;
  c.n_test = 4;
  c.n_classes = 2;
  c.latent_dim = 4;
  c.attribute_tokens_per_item = 2;
  c.vocab_size = m.vocab_size;
  c.audio_frames = m.audio_frames;
  c.audio_bins = m.audio_bins;
  c.frame_size = m.frame_size;
  c.frame_channels = m.frame_channels;
  c.frames_per_video = 2;
  c.seed = opt.seed;
  const auto corpus = data::generate_corpus(c);

  model::Model model(m, opt.seed);
  const std::vector<std::size_t> idx{0, 1};
  std::mt19937_64 batch_rng(opt.seed);
  const auto batch = train::make_batch(corpus.train, idx, m, train::FrameChoice::kCentral, 0.0, 0.0, batch_rng);
  auto f = [&] {
    std::mt19937_64 rng(opt.seed + 1);
    return objectives::total_loss(model.encoders(), model.heads(), batch, {}, rng).total;
  };
  std::vector<diff::NamedTensor> leaves;
  for (const auto& p : model.parameters()) leaves.push_back({p.name, p.tensor});
  const auto report = diff::finite_diff_gradcheck(f, leaves, opt.eps);
  std::size_t n = 0;
  for (const auto& l : report.leaves) n += l.elements_checked;
  return {"total_loss", "C=8 N_q=2 B=2 vocab=16", report.max_rel_error(), n};
}

}  // namespace

std::vector<GradcheckCase> GradcheckSuiteReport::worst_per_primitive() const {
  std::vector<GradcheckCase> out;
  std::map<std::string, std::size_t> where;
  for (const auto& c : cases) {
    const auto [it, fresh] = where.emplace(c.primitive, out.size());
    if (fresh) {
      out.push_back(c);
    } else if (c.max_rel_error > out[it->second].max_rel_error) {
      out[it->second] = c;
    }
  }
  return out;
}

bool GradcheckSuiteReport::passed() const {
  return std::all_of(cases.begin(), cases.end(), [&](const auto& c) { return c.max_rel_error <= tolerance; });
}

std::string GradcheckSuiteReport::to_text() const {
  std::ostringstream out;
  out << "primitive                   worst_rel_err  elements  shapes\n";
  for (const auto& c : worst_per_primitive()) {
    char line[160];
    std::snprintf(line, sizeof line, "%-26s %13.3e  %8zu  %s%s\n", c.primitive.c_str(), c.max_rel_error, c.elements,
                  c.variant.c_str(), c.max_rel_error <= tolerance ? "" : "  FAIL");
    out << line;
  }
  char tail[120];
  std::snprintf(tail, sizeof tail, "%s: %zu cases, tolerance %.0e, %.1f s\n", passed() ? "PASS" : "FAIL", cases.size(),
                tolerance, seconds);
  out << tail;
  return out.str();
}

std::string GradcheckSuiteReport::to_json() const {
  nlohmann::json j;
  j["passed"] = passed();
  j["tolerance"] = tolerance;
  j["seconds"] = seconds;
  for (const auto& c : worst_per_primitive())
    j["worst"].push_back({{"primitive", c.primitive}, {"shapes", c.variant}, {"max_rel_error", c.max_rel_error}});
  return j.dump();
}

GradcheckSuiteReport run_gradcheck_suite(const GradcheckSuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckSuiteReport report;
  report.tolerance = options.tolerance;
  if (options.primitives) {
    Fixture fx(options.seed);
    for (const auto& pc : primitive_cases(fx)) report.cases.push_back(check_primitive(fx, pc, options));
  }
  if (options.full_loss) report.cases.push_back(check_total_loss(options));
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace coavt::tools
