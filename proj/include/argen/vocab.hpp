#pragma once

#include <string>
#include <vector>

namespace argen {

// Closed shape-world vocabulary. Index = line number in the saved file.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kNull = 3;

    Vocab();

    int size() const { return int(words_.size()); }
    int id(const std::string& word) const;  // DataError on unknown word
    const std::string& word(int id) const;

    struct Encoded {
        std::vector<int> ids;        // length t_max
        std::vector<uint8_t> mask;   // 1 = real row
        bool truncated = false;
    };

    // [bos, words..., eos] padded to t_max. Empty text -> all pad, mask all-0.
    Encoded encode(const std::string& text, int t_max) const;
    std::string decode(const std::vector<int>& ids) const;

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

private:
    std::vector<std::string> words_;
};

}  // namespace argen
