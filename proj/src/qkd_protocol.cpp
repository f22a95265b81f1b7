#include "qdqkd/qkd_protocol.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "qdqkd/quantum_math.hpp"

namespace qdqkd::qkd {

void validate(const ChannelParams& p) {
    if (p.arm_efficiency_alice < 0 || p.arm_efficiency_alice > 1 ||
        p.arm_efficiency_bob < 0 || p.arm_efficiency_bob > 1)
        throw invalid_input("arm efficiencies must be in [0,1]");
    if (p.fiber_length_m < 0) throw invalid_input("fiber_length must be >= 0");
    if (p.dark_count_rate_hz < 0) throw invalid_input("dark_count_rate must be >= 0");
    if (p.efficiency_decay_per_hour < 0)
        throw invalid_input("efficiency_decay must be >= 0");
    if (p.reopt_threshold <= 0 || p.reopt_threshold > 1)
        throw invalid_input("reopt_threshold must be in (0,1]");
}

// ---------------------------------------------------------------------------
// key files
// ---------------------------------------------------------------------------

namespace {

constexpr char kKeyMagic[5] = {'Q', 'K', 'E', 'Y', '1'};

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u64le(uint8_t* p, uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = uint8_t(v >> (8 * i));
}
uint64_t get_u64le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

uint64_t fnv1a(const std::vector<uint8_t>& bits, size_t lo, size_t hi) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = lo; i < hi; ++i) {
        h ^= bits[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace

void write_key(const std::string& path, const KeyMaterial& key) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    uint8_t header[32] = {};
    std::memcpy(header, kKeyMagic, 5);
    header[5] = uint8_t(key.stage);
    put_u64le(header + 8, key.size_bits());
    put_u64le(header + 16, key.session_id);
    put_u64le(header + 24, key.consumed_bits);
    if (std::fwrite(header, 1, 32, f.get()) != 32)
        throw std::runtime_error("write failed: " + path);
    std::vector<uint8_t> packed((key.size_bits() + 7) / 8, 0);
    for (size_t i = 0; i < key.bits.size(); ++i)
        if (key.bits[i]) packed[i / 8] |= uint8_t(1u << (i % 8));
    if (!packed.empty() &&
        std::fwrite(packed.data(), 1, packed.size(), f.get()) != packed.size())
        throw std::runtime_error("write failed: " + path);
}

KeyMaterial read_key(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    uint8_t header[32];
    if (std::fread(header, 1, 32, f.get()) != 32 ||
        std::memcmp(header, kKeyMagic, 5) != 0)
        throw std::runtime_error("bad QKEY1 header in " + path);
    KeyMaterial key;
    key.stage = KeyStage(header[5]);
    const uint64_t n = get_u64le(header + 8);
    key.session_id = get_u64le(header + 16);
    key.consumed_bits = get_u64le(header + 24);
    if (key.consumed_bits > n)
        throw std::runtime_error("corrupt key header (consumed > length) in " + path);
    std::vector<uint8_t> packed((n + 7) / 8);
    if (!packed.empty() &&
        std::fread(packed.data(), 1, packed.size(), f.get()) != packed.size())
        throw std::runtime_error("truncated key payload in " + path);
    key.bits.resize(n);
    for (uint64_t i = 0; i < n; ++i)
        key.bits[i] = (packed[i / 8] >> (i % 8)) & 1;
    return key;
}

// ---------------------------------------------------------------------------
// synchronization
// ---------------------------------------------------------------------------

SyncResult synchronize(std::span<const analysis::DetectionRecord> alice,
                       std::span<const analysis::DetectionRecord> bob,
                       int64_t search_span_ps, int64_t bin_ps,
                       std::optional<int64_t> hint_ps) {
    if (bin_ps <= 0 || search_span_ps <= 0)
        throw invalid_input("synchronize: bin and span must be > 0");
    const int64_t center = hint_ps.value_or(0);
    const size_t nbins = size_t(search_span_ps / bin_ps) | 1;  // odd, center bin
    const int64_t lo = center - int64_t(nbins) * bin_ps / 2;
    std::vector<uint64_t> counts(nbins, 0);
    size_t j_lo = 0;
    const int64_t hi = lo + int64_t(nbins) * bin_ps;
    for (const auto& ra : alice) {
        while (j_lo < bob.size() && bob[j_lo].time_ps - ra.time_ps < lo) ++j_lo;
        for (size_t j = j_lo; j < bob.size(); ++j) {
            const int64_t dt = bob[j].time_ps - ra.time_ps;
            if (dt >= hi) break;
            ++counts[size_t((dt - lo) / bin_ps)];
        }
    }
    SyncResult res;
    const size_t kmax = std::max_element(counts.begin(), counts.end()) - counts.begin();
    std::vector<uint64_t> sorted = counts;
    std::nth_element(sorted.begin(), sorted.begin() + long(sorted.size() / 2), sorted.end());
    const double floor = std::max(double(sorted[sorted.size() / 2]), 1.0);
    res.offset_ps = lo + int64_t(kmax) * bin_ps + bin_ps / 2;
    res.peak_to_floor = double(counts[kmax]) / floor;
    res.ok = res.peak_to_floor >= 5.0;
    return res;
}

std::vector<SyncResult> synchronize_blocks(
    std::span<const analysis::DetectionRecord> alice,
    std::span<const analysis::DetectionRecord> bob, int64_t block_duration_ps,
    int64_t search_span_ps, int64_t bin_ps) {
    if (block_duration_ps <= 0) throw invalid_input("block duration must be > 0");
    std::vector<SyncResult> out;
    size_t ia = 0, ib = 0;
    std::optional<int64_t> hint;
    const int64_t t_end = std::max(alice.empty() ? 0 : alice.back().time_ps,
                                   bob.empty() ? 0 : bob.back().time_ps);
    for (int64_t t0 = 0; t0 <= t_end; t0 += block_duration_ps) {
        const int64_t t1 = t0 + block_duration_ps;
        size_t ja = ia, jb = ib;
        while (ja < alice.size() && alice[ja].time_ps < t1) ++ja;
        while (jb < bob.size() && bob[jb].time_ps < t1 + search_span_ps) ++jb;
        auto sub_a = alice.subspan(ia, ja - ia);
        // bob side may need records slightly before t0 as well
        size_t jb0 = ib;
        while (jb0 > 0 && bob[jb0 - 1].time_ps >= t0 - search_span_ps) --jb0;
        auto sub_b = bob.subspan(jb0, jb - jb0);
        SyncResult r;
        if (!sub_a.empty() && !sub_b.empty())
            r = synchronize(sub_a, sub_b, search_span_ps, bin_ps, hint);
        out.push_back(r);
        if (r.ok) hint = r.offset_ps;
        ia = ja;
        while (ib < bob.size() && bob[ib].time_ps < t1) ++ib;
    }
    return out;
}

// ---------------------------------------------------------------------------
// sifting
// ---------------------------------------------------------------------------

namespace {

struct BitInfo {
    bool valid = false;
    Basis basis = Basis::HV;
    uint8_t bit = 0;
};

BitInfo outcome_bit(uint8_t outcome) {
    using quantum::Pol;
    BitInfo info;
    switch (Pol(outcome)) {
        case Pol::H: info = {true, Basis::HV, 0}; break;
        case Pol::V: info = {true, Basis::HV, 1}; break;
        case Pol::D: info = {true, Basis::DA, 0}; break;
        case Pol::A: info = {true, Basis::DA, 1}; break;
        default: break;
    }
    return info;
}

} // namespace

SiftResult sift(std::span<const analysis::DetectionRecord> alice,
                std::span<const analysis::DetectionRecord> bob, int64_t offset_ps,
                int64_t window_ps, int64_t window_center_ps) {
    SiftResult out;
    out.alice.stage = out.bob.stage = KeyStage::Sifted;
    const int64_t lo = offset_ps + window_center_ps - window_ps / 2;
    const int64_t hi = lo + window_ps;
    size_t j = 0;
    for (const auto& ra : alice) {
        while (j < bob.size() && bob[j].time_ps - ra.time_ps < lo) ++j;
        if (j >= bob.size()) break;
        const int64_t dt = bob[j].time_ps - ra.time_ps;
        if (dt >= hi) continue;
        const auto& rb = bob[j];
        ++j;  // greedy: each click used at most once
        ++out.coincidences;
        const BitInfo ba = outcome_bit(ra.outcome), bb = outcome_bit(rb.outcome);
        if (!ba.valid || !bb.valid || ba.basis != bb.basis) continue;
        ++out.basis_matched;
        out.alice.bits.push_back(ba.bit);
        out.bob.bits.push_back(bb.bit);
        const uint64_t pulse = uint64_t(std::max<int64_t>(ra.time_ps, 0) / 12500);
        out.alice.meta.push_back({pulse, ba.basis});
        out.bob.meta.push_back({pulse, bb.basis});
    }
    return out;
}

std::optional<QberEstimate> estimate_qber(KeyMaterial& alice, KeyMaterial& bob,
                                          double sample_fraction, uint64_t seed) {
    const uint64_t n = alice.size_bits();
    if (n == 0 || n != bob.size_bits()) return std::nullopt;
    if (sample_fraction <= 0 || sample_fraction >= 1)
        throw invalid_input("sample_fraction must be in (0,1)");
    uint64_t k = uint64_t(std::llround(sample_fraction * double(n)));
    k = std::max<uint64_t>(1, std::min(k, n - 1));

    // partial Fisher-Yates over an index vector (shared public randomness)
    Rng rng(derive_seed(seed, 0x4be5));
    std::vector<uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    for (uint64_t i = 0; i < k; ++i)
        std::swap(idx[i], idx[i + rng.below(n - i)]);

    QberEstimate est;
    est.disclosed = k;
    std::vector<uint8_t> sampled(n, 0);
    for (uint64_t i = 0; i < k; ++i) {
        sampled[idx[i]] = 1;
        if (alice.bits[idx[i]] != bob.bits[idx[i]]) ++est.errors;
    }
    est.qber = double(est.errors) / double(k);
    est.confidence = num::clopper_pearson(est.errors, k);

    auto strip = [&](KeyMaterial& key) {
        KeyMaterial kept;
        kept.stage = key.stage;
        kept.session_id = key.session_id;
        for (uint64_t i = 0; i < n; ++i) {
            if (sampled[i]) continue;
            kept.bits.push_back(key.bits[i]);
            if (i < key.meta.size()) kept.meta.push_back(key.meta[i]);
        }
        key = std::move(kept);
    };
    strip(alice);
    strip(bob);
    return est;
}

// ---------------------------------------------------------------------------
// CASCADE reconciliation
// ---------------------------------------------------------------------------

namespace {

struct CascadePass {
    std::vector<uint32_t> perm;      // position -> key index
    uint32_t block_size = 0;
    std::vector<uint8_t> diff_odd;   // parity(alice block) != parity(bob block)
};

uint8_t range_parity(const std::vector<uint8_t>& bits, const std::vector<uint32_t>& perm,
                     uint32_t lo, uint32_t hi) {
    uint8_t p = 0;
    for (uint32_t i = lo; i < hi; ++i) p ^= bits[perm[i]];
    return p;
}

} // namespace

ReconcileResult reconcile(const KeyMaterial& alice, const KeyMaterial& bob,
                          double qber_estimate, uint64_t seed) {
    ReconcileResult res;
    if (alice.size_bits() != bob.size_bits())
        throw invalid_input("reconcile: key lengths differ");
    if (qber_estimate >= kQberAbortThreshold) return res;  // abort, ok = false
    const uint32_t n = uint32_t(alice.size_bits());
    if (n == 0) return res;

    std::vector<uint8_t> a = alice.bits, b = bob.bits;
    uint64_t leaked = 0, corrected = 0;
    Rng rng(derive_seed(seed, 0xca5c));

    const double q = std::clamp(qber_estimate, 0.001, kQberAbortThreshold);
    const uint32_t k1 = uint32_t(std::clamp<double>(std::ceil(0.73 / q), 2.0, double(n)));

    std::vector<CascadePass> passes;
    auto add_pass = [&](int index, int total_extra) {
        (void)total_extra;
        CascadePass pass;
        pass.perm.resize(n);
        std::iota(pass.perm.begin(), pass.perm.end(), 0u);
        if (index > 0)
            for (uint32_t i = n - 1; i > 0; --i)
                std::swap(pass.perm[i], pass.perm[rng.below(i + 1)]);
        pass.block_size = uint32_t(std::min<uint64_t>(uint64_t(k1) << index, n));
        const uint32_t nblocks = (n + pass.block_size - 1) / pass.block_size;
        pass.diff_odd.assign(nblocks, 0);
        for (uint32_t blk = 0; blk < nblocks; ++blk) {
            const uint32_t lo = blk * pass.block_size;
            const uint32_t hi = std::min(lo + pass.block_size, n);
            const uint8_t pa = range_parity(a, pass.perm, lo, hi);
            const uint8_t pb = range_parity(b, pass.perm, lo, hi);
            ++leaked;  // block parity exchange
            pass.diff_odd[blk] = pa ^ pb;
        }
        passes.push_back(std::move(pass));
    };

    // binary search inside block `blk` of pass `pi`; fixes exactly one bit
    auto bisect_fix = [&](size_t pi, uint32_t blk) {
        CascadePass& pass = passes[pi];
        uint32_t lo = blk * pass.block_size;
        uint32_t hi = std::min(lo + pass.block_size, n);
        while (hi - lo > 1) {
            const uint32_t mid = lo + (hi - lo) / 2;
            const uint8_t pa = range_parity(a, pass.perm, lo, mid);
            const uint8_t pb = range_parity(b, pass.perm, lo, mid);
            ++leaked;  // one disclosed half-parity per level
            if (pa != pb) hi = mid; else lo = mid;
        }
        const uint32_t key_index = pass.perm[lo];
        b[key_index] ^= 1;
        ++corrected;
        return key_index;
    };

    auto toggle_and_collect = [&](uint32_t key_index,
                                  std::vector<std::pair<size_t, uint32_t>>& queue) {
        for (size_t pi = 0; pi < passes.size(); ++pi) {
            CascadePass& pass = passes[pi];
            const uint32_t pos = uint32_t(
                std::find(pass.perm.begin(), pass.perm.end(), key_index) -
                pass.perm.begin());
            const uint32_t blk = pos / pass.block_size;
            pass.diff_odd[blk] ^= 1;
            if (pass.diff_odd[blk]) queue.emplace_back(pi, blk);
        }
    };

    // passes stop as soon as the verification hashes agree (the 64-bit
    // security margin subtracted during privacy amplification budgets the
    // hash comparison); error-free keys therefore leak only the first-pass
    // parities
    constexpr int kMaxPasses = 8;  // 4 scheduled + cleanup reserve
    for (int pass_count = 0; pass_count < kMaxPasses; ++pass_count) {
        if (pass_count > 0 && fnv1a(a, 0, n) == fnv1a(b, 0, n)) break;
        add_pass(pass_count, 0);
        std::vector<std::pair<size_t, uint32_t>> queue;
        CascadePass& latest = passes.back();
        for (uint32_t blk = 0; blk < latest.diff_odd.size(); ++blk)
            if (latest.diff_odd[blk]) queue.emplace_back(passes.size() - 1, blk);
        while (!queue.empty()) {
            auto [pi, blk] = queue.back();
            queue.pop_back();
            if (!passes[pi].diff_odd[blk]) continue;
            const uint32_t fixed = bisect_fix(pi, blk);
            toggle_and_collect(fixed, queue);
        }
    }

    res.verified = fnv1a(a, 0, n) == fnv1a(b, 0, n);
    res.ok = res.verified;
    res.leaked_bits = leaked;
    res.corrected_errors = corrected;
    res.alice.stage = res.bob.stage = KeyStage::Reconciled;
    res.alice.session_id = alice.session_id;
    res.bob.session_id = bob.session_id;
    res.alice.bits = std::move(a);
    res.bob.bits = std::move(b);
    return res;
}

// ---------------------------------------------------------------------------
// privacy amplification (Toeplitz hashing)
// ---------------------------------------------------------------------------

namespace {

// bits[i] of a packed word array
inline uint64_t slice64(const std::vector<uint64_t>& words, uint64_t start) {
    const uint64_t w = start / 64, off = start % 64;
    uint64_t v = words[w] >> off;
    if (off && w + 1 < words.size()) v |= words[w + 1] << (64 - off);
    return v;
}

} // namespace

KeyMaterial privacy_amplify(const KeyMaterial& key, double qber,
                            uint64_t leaked_bits, uint64_t seed) {
    const uint64_t n = key.size_bits();
    KeyMaterial out;
    out.stage = KeyStage::Amplified;
    out.session_id = key.session_id;
    // error fractions at or beyond one half leave no secret correlations
    if (qber >= 0.5) return out;
    const double yield = double(n) * (1.0 - num::binary_entropy(qber));
    const int64_t m64 = int64_t(std::floor(yield)) - int64_t(leaked_bits) - 64;
    if (m64 <= 0) return out;  // block discarded
    const uint64_t m = uint64_t(m64);

    // Toeplitz row i, column j = t[i - j + n - 1]; u reverses t so row i is
    // the contiguous slice u[m-1-i .. m-1-i+n-1]
    const uint64_t tlen = n + m - 1;
    std::vector<uint64_t> u((tlen + 63) / 64 + 1, 0);
    Rng rng(derive_seed(seed, 0x70e9));
    for (uint64_t j = 0; j < tlen; ++j) {
        const uint64_t bit = rng.next_u64() & 1;
        // u[j] = t[tlen - 1 - j]; generate t in reverse order directly
        u[j / 64] |= bit << (j % 64);
    }
    std::vector<uint64_t> kw(n / 64 + 2, 0);
    for (uint64_t i = 0; i < n; ++i)
        if (key.bits[i]) kw[i / 64] |= uint64_t(1) << (i % 64);

    out.bits.resize(m);
    for (uint64_t i = 0; i < m; ++i) {
        const uint64_t start = m - 1 - i;
        uint64_t parity = 0;
        for (uint64_t j = 0; j < n; j += 64) {
            uint64_t word = slice64(u, start + j) & kw[j / 64];
            if (n - j < 64) word &= (~uint64_t(0)) >> (64 - (n - j));
            parity ^= word;
        }
        parity ^= parity >> 32;
        parity ^= parity >> 16;
        parity ^= parity >> 8;
        parity ^= parity >> 4;
        parity ^= parity >> 2;
        parity ^= parity >> 1;
        out.bits[i] = uint8_t(parity & 1);
    }
    return out;
}

// ---------------------------------------------------------------------------
// one-time pad
// ---------------------------------------------------------------------------

namespace {

std::vector<uint8_t> otp_xor(std::span<const uint8_t> data, KeyMaterial& key) {
    const uint64_t need = uint64_t(data.size()) * 8;
    if (key.consumed_bits + need > key.size_bits())
        throw insufficient_key(
            "one-time pad: need " + std::to_string(need) + " bits, " +
            std::to_string(key.size_bits() - key.consumed_bits) + " unused remain");
    std::vector<uint8_t> out(data.begin(), data.end());
    const uint64_t base = key.consumed_bits;
    for (uint64_t i = 0; i < need; ++i)
        if (key.bits[base + i]) out[i / 8] ^= uint8_t(1u << (i % 8));
    key.consumed_bits += need;  // spent, never reused
    return out;
}

} // namespace

std::vector<uint8_t> otp_encrypt(std::span<const uint8_t> message, KeyMaterial& key) {
    return otp_xor(message, key);
}

std::vector<uint8_t> otp_decrypt(std::span<const uint8_t> ciphertext, KeyMaterial& key) {
    return otp_xor(ciphertext, key);
}

// ---------------------------------------------------------------------------
// 24-bit BMP
// ---------------------------------------------------------------------------

namespace {
uint32_t bmp_row_bytes(uint32_t width) { return (width * 3 + 3) & ~3u; }
} // namespace

std::vector<uint8_t> bmp_bytes(const Bitmap24& bmp) {
    const uint32_t row = bmp_row_bytes(bmp.width);
    const uint32_t data_size = row * bmp.height;
    if (bmp.pixels.size() != data_size)
        throw invalid_input("bitmap pixel buffer does not match dimensions");
    std::vector<uint8_t> out(54 + data_size, 0);
    out[0] = 'B';
    out[1] = 'M';
    auto put32 = [&](size_t at, uint32_t v) {
        for (int i = 0; i < 4; ++i) out[at + size_t(i)] = uint8_t(v >> (8 * i));
    };
    put32(2, 54 + data_size);
    put32(10, 54);
    put32(14, 40);
    put32(18, bmp.width);
    put32(22, bmp.height);
    out[26] = 1;           // planes
    out[28] = 24;          // bpp
    put32(34, data_size);
    put32(38, 2835);       // 72 dpi
    put32(42, 2835);
    std::copy(bmp.pixels.begin(), bmp.pixels.end(), out.begin() + 54);
    return out;
}

Bitmap24 bmp_from_bytes(std::span<const uint8_t> bytes) {
    if (bytes.size() < 54 || bytes[0] != 'B' || bytes[1] != 'M')
        throw invalid_input("not a BMP file");
    auto get32 = [&](size_t at) {
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[at + size_t(i)];
        return v;
    };
    const uint32_t offset = get32(10);
    if (bytes[28] != 24 || bytes[29] != 0)
        throw invalid_input("only uncompressed 24-bit BMPs are supported");
    if (get32(30) != 0) throw invalid_input("compressed BMPs are not supported");
    Bitmap24 bmp;
    bmp.width = get32(18);
    bmp.height = get32(22);
    const uint32_t data_size = bmp_row_bytes(bmp.width) * bmp.height;
    if (bytes.size() < offset + data_size) throw invalid_input("truncated BMP data");
    bmp.pixels.assign(bytes.begin() + offset, bytes.begin() + offset + data_size);
    return bmp;
}

void write_bmp(const std::string& path, const Bitmap24& bmp) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    const auto bytes = bmp_bytes(bmp);
    if (std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size())
        throw std::runtime_error("write failed: " + path);
}

Bitmap24 read_bmp(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<uint8_t> bytes;
    uint8_t buf[65536];
    size_t got;
    while ((got = std::fread(buf, 1, sizeof buf, f.get())) > 0)
        bytes.insert(bytes.end(), buf, buf + got);
    return bmp_from_bytes(bytes);
}

// ---------------------------------------------------------------------------
// session
// ---------------------------------------------------------------------------

namespace {

using quantum::Pol;

Pol outcome_pol(Basis basis, int bit) {
    if (basis == Basis::HV) return bit ? Pol::V : Pol::H;
    return bit ? Pol::A : Pol::D;
}

// Bob's polarization frame rotation by theta (linear H/V rotation).
Eigen::Matrix2cd rotation(double theta) {
    Eigen::Matrix2cd u;
    u << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
    return u;
}

struct BlockEnv {
    double start_s = 0.0;
    double fss_ueV = 0.0;
    double pol_angle_rad = 0.0;
    double eff_factor = 1.0;
    uint64_t n_pulses = 0;
};

struct BlockOut {
    BlockReport report;
    KeyMaterial alice_raw, bob_raw, alice_sec, bob_sec;
};

BlockOut run_block(const source::SourceParams& src0, const ChannelParams& ch,
                   const analysis::DetectorParams& det, const SessionOptions& opt,
                   const BlockEnv& env, int64_t clock_offset_ps, uint64_t block_idx) {
    BlockOut out;
    out.report.start_s = env.start_s;

    source::SourceParams src = src0;
    src.fss_ueV = env.fss_ueV;
    src.fss_drift_ueV_per_hour = 0.0;  // drift applied per block

    const uint64_t seed = derive_seed(opt.seed, 0xb10cc, block_idx);
    auto events = source::simulate_pulses(src, env.n_pulses, seed);

    const double period = src.rep_period_ps();
    const Eigen::Matrix2cd u_bob = rotation(env.pol_angle_rad);
    const double eta_a = ch.arm_efficiency_alice * env.eff_factor;
    const double eta_b = ch.arm_efficiency_bob * env.eff_factor;
    const int64_t bob_shift = int64_t(std::llround(ch.fiber_delay_ps())) + clock_offset_ps;

    Rng rng(derive_seed(seed, 0xde7ec7));
    analysis::ClickStream alice, bob;
    auto push_click = [&](analysis::ClickStream& s, double t_pulse, double emit,
                          Basis basis, int bit, int64_t shift) {
        double t = t_pulse + emit + shift;
        if (det.jitter_sigma_ps > 0) t += rng.gauss(0.0, det.jitter_sigma_ps);
        s.push_back({uint8_t(int(basis) * 2 + bit), uint8_t(outcome_pol(basis, bit)),
                     int64_t(std::llround(t))});
    };

    for (const auto& ev : events) {
        const double t_pulse = double(ev.pulse_index) * period;
        if (ev.background) {
            const bool to_bob = ev.background_in_x;
            if (!rng.bernoulli(to_bob ? eta_b : eta_a)) continue;
            const Basis basis = rng.bernoulli(0.5) ? Basis::DA : Basis::HV;
            quantum::Vec2 chi;
            chi << ev.joint_state(0), ev.joint_state(1);
            if (to_bob) chi = u_bob * chi;
            const quantum::Vec2 k0 = quantum::pol_ket(outcome_pol(basis, 0));
            const double p0 = std::norm(k0.dot(chi));
            const int bit = rng.bernoulli(p0) ? 0 : 1;
            push_click(to_bob ? bob : alice, t_pulse,
                       to_bob ? ev.x_emit_time_ps : ev.xx_emit_time_ps, basis, bit,
                       to_bob ? bob_shift : 0);
            continue;
        }
        const bool keep_a = rng.bernoulli(eta_a);
        const bool keep_b = rng.bernoulli(eta_b);
        if (!keep_a && !keep_b) continue;
        quantum::Vec4 psi = ev.joint_state;
        // rotate Bob's half: |ab> -> (I x U)|ab>
        {
            const quantum::complexd a0 = psi(0), a1 = psi(1), b0 = psi(2), b1 = psi(3);
            psi(0) = u_bob(0, 0) * a0 + u_bob(0, 1) * a1;
            psi(1) = u_bob(1, 0) * a0 + u_bob(1, 1) * a1;
            psi(2) = u_bob(0, 0) * b0 + u_bob(0, 1) * b1;
            psi(3) = u_bob(1, 0) * b0 + u_bob(1, 1) * b1;
        }
        const Basis basis_a = rng.bernoulli(0.5) ? Basis::DA : Basis::HV;
        const Basis basis_b = rng.bernoulli(0.5) ? Basis::DA : Basis::HV;
        if (keep_a && keep_b) {
            double p[4];
            double tot = 0.0;
            for (int oa = 0; oa < 2; ++oa)
                for (int ob = 0; ob < 2; ++ob) {
                    const quantum::Vec4 proj = quantum::product_ket(
                        outcome_pol(basis_a, oa), outcome_pol(basis_b, ob));
                    p[oa * 2 + ob] = std::norm(proj.dot(psi));
                    tot += p[oa * 2 + ob];
                }
            double r = rng.u01() * tot;
            int sel = 0;
            while (sel < 3 && r >= p[sel]) { r -= p[sel]; ++sel; }
            push_click(alice, t_pulse, ev.xx_emit_time_ps, basis_a, sel / 2, 0);
            push_click(bob, t_pulse, ev.x_emit_time_ps, basis_b, sel % 2, bob_shift);
        } else if (keep_a) {
            // marginal over Bob
            const quantum::Vec2 ka = quantum::pol_ket(outcome_pol(basis_a, 0));
            const quantum::complexd c0 = std::conj(ka(0)) * psi(0) + std::conj(ka(1)) * psi(2);
            const quantum::complexd c1 = std::conj(ka(0)) * psi(1) + std::conj(ka(1)) * psi(3);
            const int bit = rng.bernoulli(std::norm(c0) + std::norm(c1)) ? 0 : 1;
            push_click(alice, t_pulse, ev.xx_emit_time_ps, basis_a, bit, 0);
        } else {
            const quantum::Vec2 kb = quantum::pol_ket(outcome_pol(basis_b, 0));
            const quantum::complexd c0 = std::conj(kb(0)) * psi(0) + std::conj(kb(1)) * psi(1);
            const quantum::complexd c1 = std::conj(kb(0)) * psi(2) + std::conj(kb(1)) * psi(3);
            const int bit = rng.bernoulli(std::norm(c0) + std::norm(c1)) ? 0 : 1;
            push_click(bob, t_pulse, ev.x_emit_time_ps, basis_b, bit, bob_shift);
        }
    }

    // per-detector dead time and dark counts, then time-merge each party
    const double dense_ps = double(env.n_pulses) * period;
    auto finalize_party = [&](analysis::ClickStream& s, double t0, double t1,
                              uint64_t dseed) {
        analysis::ClickStream merged;
        for (uint8_t chn = 0; chn < 4; ++chn) {
            analysis::ClickStream one;
            for (const auto& r : s)
                if (r.channel == chn) one.push_back(r);
            analysis::DetectorParams d = det;
            d.dark_count_rate_hz = 0.0;
            // darks: uniform over the active span of this detector
            Rng drng(derive_seed(dseed, chn));
            const uint64_t nd = drng.poisson(ch.dark_count_rate_hz * (t1 - t0) * 1e-12);
            for (uint64_t i = 0; i < nd; ++i) {
                const Basis basis = Basis(chn / 2);
                one.push_back({chn, uint8_t(outcome_pol(basis, chn % 2)),
                               int64_t(t0 + drng.u01() * (t1 - t0))});
            }
            analysis::finalize_stream(one, d, 0.0, derive_seed(dseed, 16 + chn));
            merged.insert(merged.end(), one.begin(), one.end());
        }
        std::sort(merged.begin(), merged.end(),
                  [](const analysis::DetectionRecord& x, const analysis::DetectionRecord& y) {
                      return x.time_ps < y.time_ps;
                  });
        s.swap(merged);
    };
    finalize_party(alice, 0.0, dense_ps, derive_seed(seed, 0xa11ce));
    finalize_party(bob, double(bob_shift), double(bob_shift) + dense_ps,
                   derive_seed(seed, 0xb0b));

    // peak-tracking synchronization; the fiber delay pins the offset to
    // within one repetition period, so the search window excludes the
    // side peaks (center and sides differ only by the pair probability)
    SyncResult sync;
    if (!alice.empty() && !bob.empty())
        sync = synchronize(alice, bob, int64_t(period), 50, bob_shift);
    out.report.sync_ok = sync.ok;
    if (!sync.ok) {  // gap block: zero rates
        out.report.aborted = true;
        return out;
    }

    auto sifted = sift(alice, bob, sync.offset_ps,
                       int64_t(std::llround(opt.window_ps)),
                       int64_t(std::llround(opt.window_offset_ps)));
    const uint64_t raw_bits = sifted.alice.size_bits();
    out.report.raw_bps = double(raw_bits) / opt.block_s;
    out.alice_raw = sifted.alice;
    out.bob_raw = sifted.bob;

    auto est = estimate_qber(sifted.alice, sifted.bob, opt.sample_fraction,
                             derive_seed(seed, 0xe571));
    if (!est) {
        out.report.aborted = true;
        return out;
    }
    if (est->qber >= kQberAbortThreshold) {
        out.report.aborted = true;
        out.report.qber = est->qber;
        return out;
    }
    auto rec = reconcile(sifted.alice, sifted.bob, est->qber, derive_seed(seed, 0x4ec));
    if (!rec.ok) {
        out.report.aborted = true;
        out.report.qber = est->qber;
        return out;
    }
    const uint64_t total_checked = est->disclosed + rec.alice.size_bits();
    const double exact_qber =
        double(est->errors + rec.corrected_errors) / double(total_checked);
    out.report.qber = exact_qber;
    out.report.leaked_bits = rec.leaked_bits;
    if (exact_qber >= kQberAbortThreshold) {  // security gate on the final value
        out.report.aborted = true;
        return out;
    }
    auto amp = privacy_amplify(rec.alice, exact_qber, rec.leaked_bits,
                               derive_seed(seed, 0xa689));
    out.report.secure_bps = double(amp.size_bits()) / opt.block_s;
    out.alice_sec = amp;
    out.bob_sec = privacy_amplify(rec.bob, exact_qber, rec.leaked_bits,
                                  derive_seed(seed, 0xa689));
    return out;
}

} // namespace

SessionResult run_session(const source::SourceParams& src, const ChannelParams& ch,
                          const analysis::DetectorParams& det,
                          const SessionOptions& opt) {
    source::validate(src);
    validate(ch);
    analysis::validate(det);
    if (opt.duration_s <= 0 || opt.block_s <= 0 || opt.accel_factor < 1)
        throw invalid_input("session duration, block length and accel must be positive");

    const size_t n_blocks = size_t(std::ceil(opt.duration_s / opt.block_s));
    const double dense_s = opt.block_s / opt.accel_factor;
    const uint64_t pulses_per_block =
        std::max<uint64_t>(1, uint64_t(std::llround(dense_s * src.rep_rate_hz)));

    // deterministic per-session clock offset within one repetition period
    const int64_t clock_offset =
        int64_t(derive_seed(opt.seed, 0xc10c) % uint64_t(src.rep_period_ps()));

    // drift state is a pure function of wall-clock time: precompute, then
    // blocks are independent and may run on any number of workers
    std::vector<BlockEnv> envs(n_blocks);
    double eff = 1.0;
    for (size_t b = 0; b < n_blocks; ++b) {
        const double t_s = double(b) * opt.block_s;
        const double t_h = t_s / 3600.0;
        envs[b].start_s = t_s;
        envs[b].fss_ueV = src.fss_ueV + src.fss_drift_ueV_per_hour * t_h;
        envs[b].pol_angle_rad =
            ch.initial_misalignment_rad + ch.polarization_drift_rad_per_hour * t_h;
        envs[b].eff_factor = eff;
        envs[b].n_pulses = pulses_per_block;
        eff -= ch.efficiency_decay_per_hour * (opt.block_s / 3600.0);
        if (eff < ch.reopt_threshold) eff = 1.0;  // stage re-optimization
    }

    std::vector<BlockOut> blocks(n_blocks);
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const size_t b = next.fetch_add(1);
            if (b >= n_blocks) return;
            blocks[b] = run_block(src, ch, det, opt, envs[b], clock_offset, b);
        }
    };
    if (opt.threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < opt.threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    SessionResult res;
    res.alice_raw.stage = res.bob_raw.stage = KeyStage::Sifted;
    res.alice_secure.stage = res.bob_secure.stage = KeyStage::Amplified;
    const uint64_t sid = derive_seed(opt.seed, 0x5e55);
    res.alice_raw.session_id = res.bob_raw.session_id = sid;
    res.alice_secure.session_id = res.bob_secure.session_id = sid;

    auto append_key = [](KeyMaterial& dst, const KeyMaterial& piece) {
        dst.bits.insert(dst.bits.end(), piece.bits.begin(), piece.bits.end());
        dst.meta.insert(dst.meta.end(), piece.meta.begin(), piece.meta.end());
    };
    double qber_weighted = 0.0, raw_weight = 0.0, min_qber = 1.0;
    for (auto& blk : blocks) {
        res.report.blocks.push_back(blk.report);
        const double raw_bits = blk.report.raw_bps * opt.block_s;
        if (!blk.report.aborted && raw_bits > 0) {
            qber_weighted += blk.report.qber * raw_bits;
            raw_weight += raw_bits;
            min_qber = std::min(min_qber, blk.report.qber);
        }
        res.report.total_raw_bits += blk.alice_raw.size_bits();
        res.report.total_secure_bits += blk.alice_sec.size_bits();
        append_key(res.alice_raw, blk.alice_raw);
        append_key(res.bob_raw, blk.bob_raw);
        append_key(res.alice_secure, blk.alice_sec);
        append_key(res.bob_secure, blk.bob_sec);
    }
    res.report.mean_qber = raw_weight > 0 ? qber_weighted / raw_weight : 0.0;
    res.report.min_qber = raw_weight > 0 ? min_qber : 0.0;
    double dur = double(n_blocks) * opt.block_s;
    res.report.mean_raw_bps = double(res.report.total_raw_bits) / dur;
    res.report.mean_secure_bps = double(res.report.total_secure_bits) / dur;
    return res;
}

std::string session_csv(const SessionReport& rep) {
    std::string out = "block_start_s,qber,raw_bps,secure_bps\n";
    char line[128];
    for (const auto& b : rep.blocks) {
        std::snprintf(line, sizeof line, "%.1f,%.6f,%.4f,%.4f\n", b.start_s, b.qber,
                      b.raw_bps, b.secure_bps);
        out += line;
    }
    return out;
}

std::string session_json(const SessionReport& rep) {
    nlohmann::json j;
    j["blocks"] = nlohmann::json::array();
    for (const auto& b : rep.blocks)
        j["blocks"].push_back({{"start_s", b.start_s},
                               {"qber", b.qber},
                               {"raw_bps", b.raw_bps},
                               {"secure_bps", b.secure_bps},
                               {"sync_ok", b.sync_ok},
                               {"aborted", b.aborted},
                               {"leaked_bits", b.leaked_bits}});
    j["totals"] = {{"mean_qber", rep.mean_qber},
                   {"min_qber", rep.min_qber},
                   {"mean_raw_bps", rep.mean_raw_bps},
                   {"mean_secure_bps", rep.mean_secure_bps},
                   {"raw_bits", rep.total_raw_bits},
                   {"secure_bits", rep.total_secure_bits}};
    return j.dump(2);
}

} // namespace qdqkd::qkd
