#include <array>
#include <fstream>
#include <memory>
#include <system_error>

#include <json.hpp>
#include <openssl/evp.h>

#include "ph/core_model.hpp"
#include "ph/error.hpp"

namespace ph {

namespace {

struct MdCtxDeleter {
    void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};
using MdCtx = std::unique_ptr<EVP_MD_CTX, MdCtxDeleter>;

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw Error("sha256: digest init failed");
        }
    }

    void update(const void* data, std::size_t n) {
        if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("sha256: digest update failed");
    }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw Error("sha256: digest final failed");
        static constexpr char kHex[] = "0123456789abcdef";
        std::string out;
        out.reserve(len * 2);
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(kHex[md[i] >> 4]);
            out.push_back(kHex[md[i] & 0xF]);
        }
        return out;
    }

private:
    MdCtx ctx_;
};

bool is_lower_hex(const std::string& s) {
    for (char c : s) {
        if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
    }
    return true;
}

}  // namespace

std::string_view to_string(FileStatus status) {
    switch (status) {
        case FileStatus::OK: return "OK";
        case FileStatus::MISSING: return "MISSING";
        case FileStatus::SIZE_MISMATCH: return "SIZE_MISMATCH";
        case FileStatus::DIGEST_MISMATCH: return "DIGEST_MISMATCH";
    }
    return "?";
}

std::string sha256_hex(std::span<const std::uint8_t> data) {
    Sha256 h;
    h.update(data.data(), data.size());
    return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        if (in.gcount() > 0) h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

Manifest build_manifest(const std::filesystem::path& root, const std::vector<std::string>& relative_paths,
                        std::string package_version) {
    Manifest m;
    m.package_version = std::move(package_version);
    for (const auto& rel : relative_paths) {
        const auto full = root / rel;
        std::error_code ec;
        const auto size = std::filesystem::file_size(full, ec);
        if (ec) throw Error("cannot stat " + full.string() + ": " + ec.message());
        m.files.push_back({rel, size, sha256_file(full)});
    }
    return m;
}

VerificationReport verify_manifest(const Manifest& manifest, const std::filesystem::path& root) {
    if (manifest.digest_family != "sha256") {
        throw Error("unsupported digest family '" + manifest.digest_family + "'");
    }
    std::error_code ec;
    if (!std::filesystem::is_directory(root, ec)) throw Error("package root is not a directory: " + root.string());
    std::filesystem::directory_iterator probe(root, ec);
    if (ec) throw Error("package root is not readable: " + root.string() + ": " + ec.message());

    VerificationReport report;
    for (const auto& entry : manifest.files) {
        VerificationReport::Item item{entry.path, FileStatus::OK};
        const auto full = root / entry.path;
        if (!std::filesystem::is_regular_file(full, ec)) {
            item.status = FileStatus::MISSING;
        } else if (std::filesystem::file_size(full, ec) != entry.bytes || ec) {
            item.status = FileStatus::SIZE_MISMATCH;
        } else {
            try {
                if (sha256_file(full) != entry.digest) item.status = FileStatus::DIGEST_MISMATCH;
            } catch (const Error&) {
                item.status = FileStatus::MISSING;
            }
        }
        if (item.status != FileStatus::OK) report.pass = false;
        report.items.push_back(std::move(item));
    }
    return report;
}

Manifest parse_manifest(const std::string& json_text) {
    try {
        auto j = nlohmann::json::parse(json_text);
        Manifest m;
        m.package_version = j.at("package_version").get<std::string>();
        m.digest_family = j.value("digest_family", std::string("sha256"));
        for (const auto& f : j.at("files")) {
            ManifestEntry e;
            e.path = f.at("path").get<std::string>();
            e.bytes = f.at("bytes").get<std::uint64_t>();
            e.digest = f.at("digest").get<std::string>();
            if (m.digest_family == "sha256" && (e.digest.size() != 64 || !is_lower_hex(e.digest))) {
                throw Error("manifest entry " + e.path + ": digest must be 64 lowercase hex characters");
            }
            m.files.push_back(std::move(e));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("manifest: ") + e.what());
    }
}

std::string manifest_to_json(const Manifest& manifest) {
    nlohmann::ordered_json j;
    j["package_version"] = manifest.package_version;
    j["digest_family"] = manifest.digest_family;
    j["files"] = nlohmann::ordered_json::array();
    for (const auto& f : manifest.files) {
        nlohmann::ordered_json e;
        e["path"] = f.path;
        e["bytes"] = f.bytes;
        e["digest"] = f.digest;
        j["files"].push_back(std::move(e));
    }
    return j.dump(2) + "\n";
}

}  // namespace ph
