#include "relight/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace relight {

std::string to_string(LossMode mode) {
    switch (mode) {
    case LossMode::MSE: return "mse";
    case LossMode::CL: return "cl";
    case LossMode::CSL: return "csl";
    }
    return "?";
}

LossMode loss_mode_from_string(const std::string& name) {
    std::string s;
    for (char c : name) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (s == "mse") return LossMode::MSE;
    if (s == "cl") return LossMode::CL;
    if (s == "csl") return LossMode::CSL;
    throw std::invalid_argument("unknown loss mode '" + name + "' (expected mse, cl or csl)");
}

void validate(const TrainConfig& cfg) {
    if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (cfg.epochs_total < 0) throw std::invalid_argument("epochs_total must be >= 0");
    if (cfg.stage1_fraction < 0.0 || cfg.stage1_fraction > 1.0)
        throw std::invalid_argument("stage1_fraction must lie in [0, 1]");
    if (!(cfg.lr_init > 0.0)) throw std::invalid_argument("lr_init must be positive");
    if (cfg.lr_final > cfg.lr_init) throw std::invalid_argument("lr_final must not exceed lr_init");
    if (cfg.adam_beta1 < 0.0 || cfg.adam_beta1 >= 1.0 || cfg.adam_beta2 < 0.0 ||
        cfg.adam_beta2 >= 1.0)
        throw std::invalid_argument("adam betas must lie in [0, 1)");
    if (!(cfg.adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
}

AdamState make_adam_state(const ParamMap& params) {
    AdamState st;
    for (const auto& [name, p] : params) {
        st.m.emplace(name, Tensor::zeros(p.shape()));
        st.v.emplace(name, Tensor::zeros(p.shape()));
    }
    return st;
}

void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params) {
        const auto git = grads.find(name);
        if (git == grads.end())
            throw std::invalid_argument("adam_step: missing gradient for " + name);
        if (!(git->second.shape() == p.shape()))
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
        const auto mit = state.m.find(name);
        const auto vit = state.v.find(name);
        if (mit == state.m.end() || vit == state.v.end())
            throw std::invalid_argument("adam_step: state missing moments for " + name);

        Storage& ps = *p.impl()->storage;
        const Storage& gs = *git->second.impl()->storage;
        Storage& ms = *mit->second.impl()->storage;
        Storage& vs = *vit->second.impl()->storage;
        const std::int64_t n = p.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const double g = gs.get(i);
            const double m = beta1 * ms.get(i) + (1.0 - beta1) * g;
            const double v = beta2 * vs.get(i) + (1.0 - beta2) * g * g;
            ms.set(i, m);
            vs.set(i, v);
            ps.set(i, ps.get(i) - lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
        }
    }
}

double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
    if (step < 0 || step > total_steps)
        throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
    if (step == 0 || total_steps == 0) return cfg.lr_init;
    if (step == total_steps) return cfg.lr_final;
    const double x = static_cast<double>(step) / static_cast<double>(total_steps);
    return cfg.lr_final +
           0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * x));
}

Model make_model(const NetConfig& config) {
    validate(config);
    return Model{config, init_params(config)};
}

namespace {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

std::vector<std::size_t> epoch_permutation(std::uint64_t seed, int stage_index, int epoch,
                                           std::size_t n) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::uint64_t s = mix64(mix64(seed + static_cast<std::uint64_t>(stage_index)) +
                            static_cast<std::uint64_t>(epoch));
    std::mt19937_64 rng(s);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
    return perm;
}

NumericalError::NumericalError(std::int64_t step_, double lr_, std::string terms_)
    : std::runtime_error("non-finite loss at step " + std::to_string(step_) +
                         " (lr=" + std::to_string(lr_) + "): " + terms_),
      step(step_), lr(lr_), terms(std::move(terms_)) {}

namespace {

Tensor loss_for_mode(LossMode mode, const Tensor& pred, const Tensor& tgt,
                     const LossWeights& weights, const PerceptualNet& pnet,
                     CombinedBreakdown* bd) {
    switch (mode) {
    case LossMode::MSE: return l2_loss(pred, tgt);
    case LossMode::CL: return combined_loss(pred, tgt, weights, pnet, bd);
    case LossMode::CSL: return combined_sobel_loss(pred, tgt, weights.sobel_mix);
    }
    throw std::logic_error("unreachable loss mode");
}

std::string format_terms(LossMode mode, const CombinedBreakdown& bd, double total) {
    std::ostringstream os;
    if (mode == LossMode::CL)
        os << "l1=" << bd.l1 << " ssim=" << bd.ssim << " perceptual=" << bd.perceptual
           << " tv=" << bd.tv << " total=" << bd.total;
    else
        os << "loss=" << total;
    return os.str();
}

} // namespace

std::vector<double> run_stage(Model& model, const Manifest& manifest, const StageSpec& stage,
                              const TrainConfig& cfg, AdamState& state, const StepLogger& logger,
                              const EpochHook& epoch_hook) {
    validate(cfg);
    if (manifest.pairs.empty()) throw std::invalid_argument("run_stage: empty manifest");
    if (stage.epochs < 0) throw std::invalid_argument("run_stage: negative epoch count");

    const std::size_t n = manifest.pairs.size();
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
    std::int64_t total = steps_per_epoch * stage.epochs;
    if (stage.max_steps > 0) total = std::min(total, stage.max_steps);

    const PerceptualNet pnet = PerceptualNet::seeded(0);
    std::vector<double> history;
    std::int64_t step = 0;
    for (int epoch = 1; epoch <= stage.epochs && step < total; ++epoch) {
        const std::vector<std::size_t> perm = epoch_permutation(cfg.seed, stage.index, epoch, n);
        for (std::size_t pos = 0; pos < n && step < total; pos += bs) {
            const std::size_t take = std::min(bs, n - pos);
            Batch batch = make_batch(manifest, {perm.data() + pos, take});
            Tensor input = batch.input;
            Tensor target = batch.target;
            if (cfg.train_resize) {
                input = resize_half(input);
                target = resize_half(target);
            }
            const double lr = lr_at(step, total, cfg);
            CombinedBreakdown bd{};
            double loss_value = 0;
            {
                Graph graph;
                Tensor pred = net_forward(model.config, model.params, input).out;
                Tensor loss = loss_for_mode(stage.mode, pred, target, cfg.weights, pnet, &bd);
                loss_value = loss.item();
                if (!std::isfinite(loss_value))
                    throw NumericalError(stage.step_offset + step + 1, lr,
                                         format_terms(stage.mode, bd, loss_value));
                graph.backward(loss);
            }
            ParamMap grads;
            for (const auto& [name, p] : model.params) grads.emplace(name, p.grad());
            adam_step(model.params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2,
                      cfg.adam_eps);
            for (auto& [name, p] : model.params) p.zero_grad();

            ++step;
            history.push_back(loss_value);
            if (logger)
                logger({stage.step_offset + step, stage.index, lr, loss_value,
                        stage.mode == LossMode::CL ? &bd : nullptr});
        }
        if (epoch_hook) epoch_hook(model, epoch, step);
    }
    return history;
}

Checkpoint train_two_stage(const NetConfig& net_cfg, const TrainConfig& cfg,
                           const Manifest& manifest, const StepLogger& logger,
                           const EpochHook& epoch_hook) {
    validate(cfg);
    Model model = make_model(net_cfg);
    const int epochs1 =
        static_cast<int>(std::ceil(cfg.stage1_fraction * static_cast<double>(cfg.epochs_total)));
    const int epochs2 = cfg.epochs_total - epochs1;

    AdamState state1 = make_adam_state(model.params);
    const StageSpec stage1{1, cfg.stage1_loss, epochs1, 0, 0};
    const std::vector<double> h1 =
        run_stage(model, manifest, stage1, cfg, state1, logger, epoch_hook);

    AdamState state2 = make_adam_state(model.params);
    const StageSpec stage2{2, cfg.stage2_loss, epochs2, 0,
                           static_cast<std::int64_t>(h1.size())};
    EpochHook hook2;
    if (epoch_hook)
        hook2 = [&](const Model& m, int epoch, std::int64_t steps_done) {
            epoch_hook(m, epochs1 + epoch, static_cast<std::int64_t>(h1.size()) + steps_done);
        };
    const std::vector<double> h2 = run_stage(model, manifest, stage2, cfg, state2, logger, hook2);

    Checkpoint ck;
    ck.config = net_cfg;
    ck.params = model.params;
    ck.global_step = h1.size() + h2.size();
    ck.stage_index = 2;
    ck.has_adam = true;
    ck.adam = std::move(state2);
    return ck;
}

MetricsReport evaluate(const Model& model, const Manifest& manifest) {
    if (manifest.pairs.empty()) throw std::invalid_argument("evaluate: empty manifest");
    MetricsReport report;
    for (const SamplePair& pair : manifest.pairs) {
        const Tensor input = load_image(pair.input_path);
        const Tensor target = load_image(pair.target_path);
        const Tensor pred = net_forward(model.config, model.params, input).out;
        report.add(pair.scene_id, psnr(pred, target), ssim_metric(pred, target));
    }
    return report;
}

namespace {

void put_u16(std::string& out, std::uint16_t x) {
    out.push_back(static_cast<char>(x & 0xff));
    out.push_back(static_cast<char>((x >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t x) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
    if (name.size() > 0xffff) throw CheckpointError("tensor name too long: " + name);
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    out.push_back(4);
    const Shape s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

struct Cursor {
    const std::string& buf;
    std::size_t off = 0;

    void need(std::size_t k) const {
        if (off + k > buf.size()) throw TruncationError("checkpoint truncated");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t x = 0;
        for (int i = 0; i < 2; ++i)
            x |= static_cast<std::uint16_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)]) << (8 * i));
        off += 2;
        return x;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i)
            x |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)])) << (8 * i);
        off += 4;
        return x;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t x = 0;
        for (int i = 0; i < 8; ++i)
            x |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + static_cast<std::size_t>(i)])) << (8 * i);
        off += 8;
        return x;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<unsigned char>(buf[off++]);
    }
    std::string bytes(std::size_t k) {
        need(k);
        std::string s = buf.substr(off, k);
        off += k;
        return s;
    }
};

} // namespace

void checkpoint_save(const std::string& path, const Checkpoint& ckpt) {
    std::string buf;
    buf.append("DMSH");
    put_u32(buf, kCheckpointVersion);
    put_u32(buf, static_cast<std::uint32_t>(ckpt.config.base_channels));
    put_u32(buf, static_cast<std::uint32_t>(NetConfig::levels));
    put_u32(buf, static_cast<std::uint32_t>(ckpt.config.stacks));
    put_u64(buf, ckpt.config.init_seed);
    put_u64(buf, ckpt.global_step);
    put_u32(buf, ckpt.stage_index);
    buf.push_back(ckpt.has_adam ? 1 : 0);
    put_u64(buf, ckpt.has_adam ? ckpt.adam.t : 0);

    const std::size_t per = ckpt.params.size();
    put_u32(buf, static_cast<std::uint32_t>(per * (ckpt.has_adam ? 3 : 1)));
    for (const auto& [name, t] : ckpt.params) put_tensor(buf, name, t);
    if (ckpt.has_adam) {
        if (ckpt.adam.m.size() != per || ckpt.adam.v.size() != per)
            throw CheckpointError("adam state does not match parameter map");
        for (const auto& [name, t] : ckpt.adam.m) put_tensor(buf, "m:" + name, t);
        for (const auto& [name, t] : ckpt.adam.v) put_tensor(buf, "v:" + name, t);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed: " + path);
}

Checkpoint checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open: " + path);
    std::string buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

    Cursor c{buf};
    if (c.bytes(4) != "DMSH") throw BadMagicError("bad checkpoint magic in " + path);
    const std::uint32_t version = c.u32();
    if (version != kCheckpointVersion)
        throw VersionError("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ck;
    ck.config.base_channels = static_cast<int>(c.u32());
    const std::uint32_t levels = c.u32();
    if (levels != static_cast<std::uint32_t>(NetConfig::levels))
        throw CheckpointError("unsupported pyramid depth " + std::to_string(levels));
    ck.config.stacks = static_cast<int>(c.u32());
    ck.config.init_seed = c.u64();
    ck.global_step = c.u64();
    ck.stage_index = c.u32();
    ck.has_adam = c.u8() != 0;
    ck.adam.t = c.u64();
    if (!ck.has_adam) ck.adam.t = 0;

    const std::uint32_t count = c.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = c.u16();
        const std::string name = c.bytes(name_len);
        if (c.u8() != 4) throw CheckpointError("unexpected tensor rank in " + path);
        Shape s;
        s.n = static_cast<int>(c.u32());
        s.c = static_cast<int>(c.u32());
        s.h = static_cast<int>(c.u32());
        s.w = static_cast<int>(c.u32());
        if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
            throw CheckpointError("bad tensor dims for " + name);
        std::vector<double> vals(static_cast<std::size_t>(s.numel()));
        for (double& v : vals) {
            const std::uint32_t bits = c.u32();
            float f;
            std::memcpy(&f, &bits, 4);
            v = f;
        }
        Tensor t = Tensor::from_values(s, vals);
        if (name.rfind("m:", 0) == 0)
            ck.adam.m.emplace(name.substr(2), t);
        else if (name.rfind("v:", 0) == 0)
            ck.adam.v.emplace(name.substr(2), t);
        else {
            t.set_requires_grad(true);
            ck.params.emplace(name, t);
        }
    }
    if (c.off != buf.size()) throw TruncationError("trailing bytes after checkpoint payload");

    validate(ck.config);
    const ParamMap reference = init_params(ck.config);
    if (reference.size() != ck.params.size())
        throw CheckpointError("checkpoint parameter set does not match its config");
    for (const auto& [name, t] : reference) {
        const auto it = ck.params.find(name);
        if (it == ck.params.end())
            throw CheckpointError("checkpoint missing parameter " + name);
        if (!(it->second.shape() == t.shape()))
            throw CheckpointError("checkpoint shape mismatch for " + name);
    }
    if (ck.has_adam) {
        if (ck.adam.m.size() != ck.params.size() || ck.adam.v.size() != ck.params.size())
            throw CheckpointError("checkpoint adam moments do not match parameters");
        for (const auto& [name, t] : ck.params) {
            const auto mit = ck.adam.m.find(name);
            const auto vit = ck.adam.v.find(name);
            if (mit == ck.adam.m.end() || vit == ck.adam.v.end() ||
                !(mit->second.shape() == t.shape()) || !(vit->second.shape() == t.shape()))
                throw CheckpointError("checkpoint adam moments do not match parameters");
        }
    }
    return ck;
}

} // namespace relight
