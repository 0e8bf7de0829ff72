#include "coavt/model.hpp"

namespace coavt::model {

Model::Model(const ModelConfig& cfg, std::uint64_t seed)
    : encoders_(cfg, seed), heads_(objectives::PretrainHeads::make(cfg, seed ^ 0x68656164ULL)) {}

void Model::add_classifier(Condition c, std::size_t classes, std::uint64_t seed) {
  if (classes < 2) throw ContractError("classifier: need at least two classes");
  Initializer init(seed, config().init_std);
  classifiers_.insert_or_assign(c, Linear::make(init, config().hidden, classes));
}

const Linear& Model::classifier(Condition c) const {
  const auto it = classifiers_.find(c);
  if (it == classifiers_.end())
    throw ContractError(std::string("classify: no classification head for ") + condition_name(c));
  return it->second;
}

Tensor Model::classify_logits(Condition c, const data::PatchBatch* audio, const data::PatchBatch* visual) const {
  const Linear& head = classifier(c);
  const auto cond = encoders_.condition(c, audio, visual);
  const auto q = encoders_.query_forward(cond, QueryMode::kExtract);
  return head(diff::mean_pool(q.queries.outputs));
}

ParameterList Model::parameters() const {
  ParameterList out;
  encoders_.collect(out);
  heads_.collect(out);
  for (const auto& [cond, head] : classifiers_) head.collect(out, std::string("cls.") + condition_name(cond));
  return out;
}

}  // namespace coavt::model
