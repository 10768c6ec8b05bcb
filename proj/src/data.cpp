#include "tavs/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace tavs::data {

using nlohmann::json;

std::vector<std::string> tokenize(const std::string &text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            out.push_back(std::move(current));
            current.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

bool is_punctuation(const std::string &token) {
    return !token.empty() &&
           std::all_of(token.begin(), token.end(), [](unsigned char c) { return std::ispunct(c) != 0; });
}

std::string detokenize(const std::vector<std::string> &words) {
    std::string out;
    for (const auto &w : words) {
        if (!out.empty() && !is_punctuation(w)) {
            out.push_back(' ');
        }
        out += w;
    }
    return out;
}

void StoryCase::validate() const {
    if (features.rows() < 1) {
        throw DataError("case " + id + ": no photo features");
    }
    if (!features.allFinite()) {
        throw DataError("case " + id + ": non-finite feature value");
    }
    if (tokens.empty()) {
        throw DataError("case " + id + ": empty token sequence");
    }
    if (tokens.back() != kEos) {
        throw DataError("case " + id + ": token sequence must end with <eos>");
    }
}

Vocabulary::Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
    for (int i = 0; i < kNumSpecials; ++i) {
        index_[tokens_[static_cast<std::size_t>(i)]] = i;
    }
}

Vocabulary Vocabulary::build(const std::vector<StoryRecord> &records, int min_freq) {
    if (records.empty()) {
        throw DataError("build_vocab: empty corpus");
    }
    std::map<std::string, int> freq;
    for (const auto &r : records) {
        for (const auto &w : r.words()) {
            ++freq[w];
        }
    }
    std::vector<std::pair<std::string, int>> entries;
    for (const auto &[w, n] : freq) {
        if (n >= min_freq) {
            entries.emplace_back(w, n);
        }
    }
    // std::map iteration is lexicographic, so a stable sort keeps that tie order.
    std::stable_sort(entries.begin(), entries.end(), [](const auto &a, const auto &b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto &[w, n] : entries) {
        if (!v.index_.contains(w)) {
            v.index_[w] = static_cast<int>(v.tokens_.size());
            v.tokens_.push_back(w);
        }
    }
    return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    if (tokens.size() < kNumSpecials) {
        throw DataError("vocabulary: missing special tokens");
    }
    for (int i = 0; i < kNumSpecials; ++i) {
        if (tokens[static_cast<std::size_t>(i)] != v.tokens_[static_cast<std::size_t>(i)]) {
            throw DataError("vocabulary: special token at id " + std::to_string(i) + " is wrong");
        }
    }
    v.tokens_ = std::move(tokens);
    v.index_.clear();
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
            throw DataError("vocabulary: duplicate token '" + v.tokens_[i] + "'");
        }
    }
    return v;
}

int Vocabulary::id(const std::string &token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string &Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) {
        throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string> &words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto &w : words) {
        ids.push_back(id(w));
    }
    return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int> &ids) const {
    std::vector<std::string> out;
    for (int i : ids) {
        if (i == kEos) {
            break;
        }
        if (i == kPad || i == kBos) {
            continue;
        }
        out.push_back(token(i));
    }
    return out;
}

StoryCase to_case(const StoryRecord &record, const Vocabulary &vocab) {
    StoryCase c{record.id, record.topic, record.features, vocab.encode(record.words())};
    c.tokens.push_back(kEos);
    c.validate();
    return c;
}

std::vector<StoryCase> to_cases(const std::vector<StoryRecord> &records, const Vocabulary &vocab) {
    std::vector<StoryCase> out;
    out.reserve(records.size());
    for (const auto &r : records) {
        out.push_back(to_case(r, vocab));
    }
    return out;
}

void save_dataset(const std::string &path, const DatasetHeader &header, const std::vector<StoryRecord> &records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write dataset file " + path);
    }
    json head = {{"schema_version", header.schema_version},
                 {"photos", header.photos},
                 {"feature_dim", header.feature_dim}};
    out << head.dump() << '\n';
    for (const auto &r : records) {
        json features = json::array();
        for (Eigen::Index i = 0; i < r.features.rows(); ++i) {
            json row = json::array();
            for (Eigen::Index j = 0; j < r.features.cols(); ++j) {
                row.push_back(r.features(i, j));
            }
            features.push_back(std::move(row));
        }
        json rec = {{"id", r.id}, {"topic", r.topic}, {"features", std::move(features)}, {"text", r.text}};
        out << rec.dump() << '\n';
    }
    if (!out) {
        throw DataError("failed writing dataset file " + path);
    }
}

namespace {

StoryRecord parse_record(const json &j, const DatasetHeader &header, int line_no) {
    const std::string where = "line " + std::to_string(line_no);
    StoryRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        r.topic = j.at("topic").get<std::string>();
        r.text = j.at("text").get<std::string>();
        const auto &features = j.at("features");
        if (!features.is_array()) {
            throw DataError(where + ": 'features' must be an array");
        }
        if (static_cast<int>(features.size()) != header.photos) {
            throw DataError(where + ": record '" + r.id + "' has " + std::to_string(features.size()) +
                            " feature vectors, expected " + std::to_string(header.photos));
        }
        r.features.resize(header.photos, header.feature_dim);
        for (int i = 0; i < header.photos; ++i) {
            const auto &row = features[static_cast<std::size_t>(i)];
            if (!row.is_array() || static_cast<int>(row.size()) != header.feature_dim) {
                throw DataError(where + ": record '" + r.id + "' photo " + std::to_string(i) +
                                " has wrong feature dimension, expected " + std::to_string(header.feature_dim));
            }
            for (int k = 0; k < header.feature_dim; ++k) {
                r.features(i, k) = row[static_cast<std::size_t>(k)].get<double>();
            }
        }
    } catch (const json::exception &e) {
        throw DataError(where + ": malformed record: " + e.what());
    }
    if (!r.features.allFinite()) {
        throw DataError(where + ": record '" + r.id + "' has non-finite features");
    }
    return r;
}

} // namespace

Dataset load_dataset(const std::string &path, const LoadOptions &options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open dataset file " + path);
    }
    Dataset ds;
    std::string line;
    int line_no = 0;
    if (!std::getline(in, line)) {
        throw DataError(path + ": empty dataset file");
    }
    ++line_no;
    try {
        const json head = json::parse(line);
        ds.header.schema_version = head.at("schema_version").get<int>();
        ds.header.photos = head.at("photos").get<int>();
        ds.header.feature_dim = head.at("feature_dim").get<int>();
    } catch (const json::exception &e) {
        throw DataError(path + ": line 1: malformed header: " + e.what());
    }
    if (ds.header.schema_version != kSchemaVersion) {
        throw DataError(path + ": unsupported schema_version " + std::to_string(ds.header.schema_version));
    }
    if (ds.header.photos < 1 || ds.header.feature_dim < 1) {
        throw DataError(path + ": header must declare photos >= 1 and feature_dim >= 1");
    }
    if (options.photos && *options.photos != ds.header.photos) {
        throw DataError(path + ": dataset has " + std::to_string(ds.header.photos) + " photos per story, expected " +
                        std::to_string(*options.photos));
    }
    if (options.feature_dim && *options.feature_dim != ds.header.feature_dim) {
        throw DataError(path + ": dataset feature_dim " + std::to_string(ds.header.feature_dim) + ", expected " +
                        std::to_string(*options.feature_dim));
    }
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception &e) {
            throw DataError(path + ": line " + std::to_string(line_no) + ": malformed record: " + e.what());
        }
        StoryRecord r = parse_record(j, ds.header, line_no);
        const auto n = static_cast<int>(r.words().size());
        if (n < options.min_tokens || n > options.max_tokens) {
            ++ds.dropped;
            continue;
        }
        ds.records.push_back(std::move(r));
    }
    return ds;
}

TopicSplit split_topics(const std::vector<StoryRecord> &records, int n_train) {
    std::map<std::string, int> counts;
    for (const auto &r : records) {
        ++counts[r.topic];
    }
    if (n_train < 1 || static_cast<int>(counts.size()) < n_train + 1) {
        throw DataError("split_topics: need at least " + std::to_string(n_train + 1) + " topics, found " +
                        std::to_string(counts.size()));
    }
    std::vector<std::pair<std::string, int>> sorted(counts.begin(), counts.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto &a, const auto &b) { return a.second > b.second; });
    TopicSplit split;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        (static_cast<int>(i) < n_train ? split.train : split.test).push_back(sorted[i].first);
    }
    return split;
}

TopicPool group_by_topic(const std::vector<StoryCase> &cases) {
    TopicPool pool;
    for (const auto &c : cases) {
        pool[c.topic].push_back(c);
    }
    return pool;
}

} // namespace tavs::data
