#pragma once

// Embedding providers and the binary feature bank. The hashed n-gram
// provider is the deterministic in-process encoder; the remote provider
// speaks the OpenAI embeddings wire shape. Both yield one vector per
// instruction/readback pair.

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "scope/corpus.hpp"
#include "scope/detail.hpp"

namespace scope {

// Raised when a remote embedding or completion call fails at the HTTP layer.
struct RemoteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmbedConfig {
    std::string kind = "hashed_ngram";  // "hashed_ngram" or "remote"
    std::size_t dim = 768;
    int ngram_lo = 1;
    int ngram_hi = 3;
    std::uint64_t seed = 42;
    // Remote settings. base_url is the full endpoint; the API key is read
    // from the named environment variable and never stored or serialized.
    std::string base_url;
    std::string model;
    std::string api_key_env = "SCOPE_LLM_API_KEY";
    int timeout_ms = 30000;
};

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dim() const = 0;
    // Stable identifier of the provider configuration (never includes secrets).
    virtual std::string fingerprint() const = 0;
    virtual std::vector<float> embed_pair(const std::string& instruction,
                                          const std::string& readback) = 0;
};

// Seeded signed feature hashing over UTF-8 code-point n-grams of the
// concatenated pair. The separator byte 0x1F cannot occur in corpus text, so
// ("ab","c") and ("a","bc") hash differently.
class HashedNgramProvider final : public EmbeddingProvider {
public:
    explicit HashedNgramProvider(const EmbedConfig& cfg) : cfg_(cfg) {
        if (cfg_.dim == 0) throw ContractError("HashedNgramProvider: dim must be positive");
        if (cfg_.ngram_lo < 1 || cfg_.ngram_hi < cfg_.ngram_lo)
            throw ContractError("HashedNgramProvider: bad ngram range");
    }

    std::size_t dim() const override { return cfg_.dim; }

    std::string fingerprint() const override {
        std::ostringstream os;
        os << "hashed_ngram:d=" << cfg_.dim << ":n=" << cfg_.ngram_lo << "-" << cfg_.ngram_hi
           << ":seed=" << cfg_.seed;
        return os.str();
    }

    std::vector<float> embed_pair(const std::string& instruction,
                                  const std::string& readback) override {
        const std::string text = instruction + '\x1F' + readback;
        std::vector<double> acc(cfg_.dim, 0.0);
        const auto starts = detail::utf8_starts(text);
        const std::size_t points = starts.size() - 1;
        for (int n = cfg_.ngram_lo; n <= cfg_.ngram_hi; ++n) {
            if (std::size_t(n) > points) break;
            for (std::size_t i = 0; i + n <= points; ++i) {
                const std::string_view gram =
                    std::string_view(text).substr(starts[i], starts[i + n] - starts[i]);
                const std::uint64_t h = detail::fnv1a64(gram, cfg_.seed);
                const std::size_t idx = h % cfg_.dim;
                acc[idx] += (h >> 63) ? -1.0 : 1.0;
            }
        }
        double norm = 0.0;
        for (double v : acc) norm += v * v;
        norm = std::sqrt(norm);
        std::vector<float> out(cfg_.dim, 0.0f);
        if (norm > 0.0)
            for (std::size_t i = 0; i < cfg_.dim; ++i) out[i] = float(acc[i] / norm);
        return out;
    }

private:
    EmbedConfig cfg_;
};

// POSTs {"model", "input": [text]} to base_url and returns the service's
// vector verbatim after a dimension check.
class RemoteEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit RemoteEmbeddingProvider(const EmbedConfig& cfg) : cfg_(cfg) {
        if (cfg_.base_url.empty())
            throw ContractError("RemoteEmbeddingProvider: base_url is required");
    }

    std::size_t dim() const override { return cfg_.dim; }

    std::string fingerprint() const override {
        std::ostringstream os;
        os << "remote:" << cfg_.model << ":d=" << cfg_.dim;
        return os.str();
    }

    std::vector<float> embed_pair(const std::string& instruction,
                                  const std::string& readback) override {
        const std::string text = instruction + '\x1F' + readback;
        nlohmann::json body;
        body["model"] = cfg_.model;
        body["input"] = nlohmann::json::array({text});

        auto [host, path] = split_url(cfg_.base_url);
        httplib::Client client(host);
        client.set_connection_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
        client.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
        httplib::Headers headers;
        if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
            headers.emplace("Authorization", std::string("Bearer ") + key);

        auto res = client.Post(path, headers, body.dump(), "application/json");
        if (!res) throw RemoteError("embedding request failed: no response from " + host);
        if (res->status >= 400)
            throw RemoteError("embedding request failed: HTTP " + std::to_string(res->status) +
                              ": " + res->body.substr(0, 200));
        try {
            const auto j = nlohmann::json::parse(res->body);
            const auto& vec = j.at("data").at(0).at("embedding");
            if (vec.size() != cfg_.dim)
                throw ValidationError("embedding dimension mismatch: expected " +
                                      std::to_string(cfg_.dim) + ", got " +
                                      std::to_string(vec.size()));
            std::vector<float> out;
            out.reserve(cfg_.dim);
            for (const auto& v : vec) out.push_back(v.get<float>());
            return out;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("embedding response: ") + e.what());
        }
    }

private:
    static std::pair<std::string, std::string> split_url(const std::string& url) {
        // Scheme and host go to the client; the rest is the request path.
        const std::size_t scheme = url.find("://");
        const std::size_t host_start = scheme == std::string::npos ? 0 : scheme + 3;
        const std::size_t slash = url.find('/', host_start);
        if (slash == std::string::npos) return {url, "/"};
        return {url.substr(0, slash), url.substr(slash)};
    }

    EmbedConfig cfg_;
};

inline std::unique_ptr<EmbeddingProvider> make_provider(const EmbedConfig& cfg) {
    if (cfg.kind == "hashed_ngram") return std::make_unique<HashedNgramProvider>(cfg);
    if (cfg.kind == "remote") return std::make_unique<RemoteEmbeddingProvider>(cfg);
    throw ContractError("make_provider: unknown embedding kind '" + cfg.kind + "'");
}

struct BankEntry {
    std::string id;
    std::optional<OpenLabel> label;
    std::vector<float> vec;
};

struct FeatureBank {
    std::size_t dim = 0;
    std::string fingerprint;
    std::vector<BankEntry> entries;

    const BankEntry* find(std::string_view id) const {
        for (const auto& e : entries)
            if (e.id == id) return &e;
        return nullptr;
    }
};

// Embeds every pair in corpus order. Any provider failure is rethrown with
// the offending pair id attached.
inline FeatureBank build_feature_bank(const Corpus& corpus, EmbeddingProvider& provider) {
    FeatureBank bank;
    bank.dim = provider.dim();
    std::string id_blob;
    for (const auto& p : corpus) {
        BankEntry e;
        e.id = p.id;
        e.label = p.label;
        try {
            e.vec = provider.embed_pair(p.instruction, p.readback);
        } catch (const std::exception& err) {
            throw RemoteError("embedding pair '" + p.id + "' failed: " + err.what());
        }
        if (e.vec.size() != bank.dim)
            throw ValidationError("embedding pair '" + p.id + "': wrong dimension");
        id_blob += p.id;
        id_blob += '\n';
        bank.entries.push_back(std::move(e));
    }
    std::ostringstream fp;
    fp << provider.fingerprint() << "|n=" << bank.entries.size() << "|ids=" << std::hex
       << detail::fnv1a64(id_blob);
    bank.fingerprint = fp.str();
    return bank;
}

namespace bank_detail {
inline constexpr char kMagic[4] = {'S', 'C', 'F', 'B'};
inline constexpr std::uint32_t kFormatVersion = 1;
}  // namespace bank_detail

inline std::string bank_to_bytes(const FeatureBank& bank) {
    std::string buf;
    buf.append(bank_detail::kMagic, 4);
    detail::put_u32(buf, bank_detail::kFormatVersion);
    detail::put_u32(buf, std::uint32_t(bank.dim));
    detail::put_u64(buf, bank.entries.size());
    detail::put_u32(buf, std::uint32_t(bank.fingerprint.size()));
    buf += bank.fingerprint;
    for (const auto& e : bank.entries) {
        detail::put_u32(buf, std::uint32_t(e.id.size()));
        buf += e.id;
        buf.push_back(char(e.label ? int(*e.label) : 0));
        for (float v : e.vec) detail::put_f32(buf, v);
    }
    return buf;
}

inline FeatureBank bank_from_bytes(std::string_view bytes) {
    detail::ByteReader r{bytes};
    if (r.bytes(4) != std::string(bank_detail::kMagic, 4))
        throw ParseError("feature bank: bad magic");
    const std::uint32_t version = r.u32();
    if (version != bank_detail::kFormatVersion)
        throw ParseError("feature bank: unsupported format version " + std::to_string(version));
    FeatureBank bank;
    bank.dim = r.u32();
    const std::uint64_t count = r.u64();
    bank.fingerprint = r.bytes(r.u32());
    bank.entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        BankEntry e;
        e.id = r.bytes(r.u32());
        const int code = static_cast<unsigned char>(r.bytes(1)[0]);
        if (code != 0) {
            if (code < 1 || code > 5) throw ParseError("feature bank: bad label code");
            e.label = OpenLabel(code);
        }
        e.vec.resize(bank.dim);
        for (std::size_t k = 0; k < bank.dim; ++k) e.vec[k] = r.f32();
        bank.entries.push_back(std::move(e));
    }
    if (r.pos != bytes.size()) throw ParseError("feature bank: trailing bytes");
    return bank;
}

inline void save_bank(const FeatureBank& bank, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot write bank file: " + path);
    const std::string bytes = bank_to_bytes(bank);
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

inline FeatureBank load_bank(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open bank file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return bank_from_bytes(buf.str());
}

}  // namespace scope
