#include "ntq/eval.hpp"

#include <cstdio>
#include <sstream>

namespace ntq {

double DivergenceReport::mean_dmu() const {
  double acc = 0;
  for (const double d : dmu) acc += d;
  return dmu.empty() ? 0.0 : acc / static_cast<double>(dmu.size());
}

namespace {

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

std::string DivergenceReport::render_text() const {
  std::ostringstream os;
  os << "layer  dmu       dvar\n";
  for (size_t l = 0; l < dmu.size(); ++l) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-6zu %-9.6f %-9.6f\n", l, dmu[l], dvar[l]);
    os << buf;
  }
  os << "mean   " << fmt4(mean_dmu()) << '\n';
  return os.str();
}

std::vector<ClozeItem> make_cloze_items(std::span<const int> tokens, int context_len, int n_items) {
  if (static_cast<int>(tokens.size()) < context_len + 1) {
    throw ContractError("make_cloze_items: text shorter than context_len + 1");
  }
  if (n_items <= 0) throw ContractError("make_cloze_items: n_items must be positive");
  const int64_t max_start = static_cast<int64_t>(tokens.size()) - context_len - 1;
  std::vector<ClozeItem> items;
  items.reserve(static_cast<size_t>(n_items));
  for (int i = 0; i < n_items; ++i) {
    const int64_t start = n_items == 1 ? 0 : max_start * i / (n_items - 1);
    std::vector<int> ctx(tokens.begin() + start, tokens.begin() + start + context_len);
    items.emplace_back(std::move(ctx), tokens[static_cast<size_t>(start + context_len)]);
  }
  return items;
}

ComparisonTable compare(const std::vector<std::pair<std::string, AnyModelRef>>& methods,
                        const std::vector<std::pair<std::string, std::vector<int>>>& datasets, int stride,
                        int cloze_items_per_dataset) {
  if (methods.empty()) throw ContractError("compare: need at least one method");
  ComparisonTable table;
  for (const auto& [method, model] : methods) {
    for (const auto& [dataset, tokens] : datasets) {
      CompareRow row;
      row.method = method;
      row.dataset = dataset;
      std::visit(
          [&](const auto* m) {
            row.result = perplexity(*m, std::span<const int>(tokens), stride, dataset);
            const int ctx = std::min(m->config.max_seq_len, 64);
            if (static_cast<int>(tokens.size()) > ctx + 1 && cloze_items_per_dataset > 0) {
              const auto items = make_cloze_items(std::span<const int>(tokens), ctx, cloze_items_per_dataset);
              row.result.last_word_acc = last_word_accuracy(*m, items, dataset).last_word_acc;
            }
          },
          model);
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

std::string ComparisonTable::render_csv() const {
  std::ostringstream os;
  os << "method,dataset,ppl,last_word_acc,n_tokens\n";
  for (const CompareRow& r : rows) {
    os << r.method << ',' << r.dataset << ',' << fmt4(r.result.ppl) << ',' << fmt4(r.result.last_word_acc) << ','
       << r.result.n_tokens << '\n';
  }
  return os.str();
}

std::string ComparisonTable::render_text() const {
  size_t mw = 6, dw = 7;
  for (const CompareRow& r : rows) {
    mw = std::max(mw, r.method.size());
    dw = std::max(dw, r.dataset.size());
  }
  std::ostringstream os;
  os << std::string(mw - 6, ' ') << "method  " << std::string(dw - 7, ' ') << "dataset  " << "ppl        "
     << "last_word_acc  " << "n_tokens\n";
  for (const CompareRow& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%*s  %*s  %-9s  %-13s  %lld\n", static_cast<int>(mw), r.method.c_str(),
                  static_cast<int>(dw), r.dataset.c_str(), fmt4(r.result.ppl).c_str(),
                  fmt4(r.result.last_word_acc).c_str(), static_cast<long long>(r.result.n_tokens));
    os << buf;
  }
  return os.str();
}

}  // namespace ntq
