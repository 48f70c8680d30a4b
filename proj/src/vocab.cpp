#include "argen/vocab.hpp"

#include <fstream>
#include <sstream>

#include "argen/error.hpp"
#include "argen/scene.hpp"

namespace argen {

Vocab::Vocab() {
    words_ = {"<pad>", "<bos>", "<eos>", "<null>"};
    const char* grammar[] = {"a",   "and",    "at",      "on",     "the",    "background",
                             "segment", ".", "top", "middle", "bottom", "left", "center", "right"};
    for (const char* w : grammar) words_.push_back(w);
    for (int i = 0; i < kNumColors; ++i) words_.push_back(kColorNames[i]);
    for (int i = 0; i < kNumShapes; ++i) words_.push_back(kShapeNames[i]);
    for (int i = 0; i < kNumSizes; ++i) words_.push_back(kSizeNames[i]);
}

int Vocab::id(const std::string& word) const {
    for (size_t i = 0; i < words_.size(); ++i)
        if (words_[i] == word) return int(i);
    throw DataError("vocab: unknown word '" + word + "'");
}

const std::string& Vocab::word(int id) const {
    ARGEN_CHECK(id >= 0 && id < size(), IndexError, "vocab: id out of range");
    return words_[size_t(id)];
}

Vocab::Encoded Vocab::encode(const std::string& text, int t_max) const {
    Encoded e;
    e.ids.assign(size_t(t_max), kPad);
    e.mask.assign(size_t(t_max), 0);
    std::istringstream is(text);
    std::vector<int> body;
    std::string w;
    while (is >> w) body.push_back(id(w));
    if (body.empty()) return e;
    std::vector<int> full;
    full.push_back(kBos);
    for (int t : body) full.push_back(t);
    full.push_back(kEos);
    if (int(full.size()) > t_max) {
        e.truncated = true;
        full.resize(size_t(t_max));
        full.back() = kEos;
    }
    for (size_t i = 0; i < full.size(); ++i) {
        e.ids[i] = full[i];
        e.mask[i] = 1;
    }
    return e;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::ostringstream os;
    bool first = true;
    for (int t : ids) {
        if (t == kPad || t == kBos || t == kEos || t == kNull) continue;
        if (!first) os << " ";
        os << word(t);
        first = false;
    }
    return os.str();
}

void Vocab::save(const std::string& path) const {
    std::ofstream f(path);
    ARGEN_CHECK(f.good(), DataError, "vocab: cannot write " + path);
    for (const auto& w : words_) f << w << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream f(path);
    ARGEN_CHECK(f.good(), DataError, "vocab: cannot read " + path);
    Vocab v;
    v.words_.clear();
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) v.words_.push_back(line);
    ARGEN_CHECK(v.size() > 4, DataError, "vocab: file too short");
    return v;
}

}  // namespace argen
