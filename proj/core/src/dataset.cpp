#include "dawn/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dawn/common.hpp"

namespace fs = std::filesystem;

namespace dawn {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'E', 'P'};
constexpr uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

void put_vec2(std::ostream& os, Vec2 v) {
    put(os, v.x);
    put(os, v.y);
}

Vec2 get_vec2(std::istream& is) {
    Vec2 v;
    v.x = get<double>(is);
    v.y = get<double>(is);
    return v;
}

void put_rect(std::ostream& os, const Rect& r) {
    put_vec2(os, r.lo);
    put_vec2(os, r.hi);
}

Rect get_rect(std::istream& is) {
    Rect r;
    r.lo = get_vec2(is);
    r.hi = get_vec2(is);
    return r;
}

std::string episode_filename(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ep%05d.mmep", index);
    return buf;
}

}  // namespace

int64_t Dataset::total_frames() const {
    int64_t n = 0;
    for (const auto& e : episodes) n += e.length();
    return n;
}

void Dataset::compute_action_stats() {
    act_min = {1e9f, 1e9f, 1e9f};
    act_max = {-1e9f, -1e9f, -1e9f};
    for (const auto& e : episodes)
        for (const auto& a : e.actions)
            for (int d = 0; d < 3; ++d) {
                act_min[d] = std::min(act_min[d], a[d]);
                act_max[d] = std::max(act_max[d], a[d]);
            }
}

void Dataset::build_world_caches() {
    for (auto& e : episodes) {
        e.worlds.clear();
        e.worlds.reserve(e.length());
        WorldState ws = e.init_world;
        e.worlds.push_back(ws);
        for (int t = 0; t + 1 < e.length(); ++t) {
            SimAction a{e.actions[t][0], e.actions[t][1], e.actions[t][2]};
            step(ws, a);
            e.worlds.push_back(ws);
        }
    }
}

void write_episode(const std::string& path, const Episode& ep) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(kMagic, 4);
    put(f, kVersion);
    // task metadata block
    put(f, static_cast<uint32_t>(ep.task.kind));
    put(f, static_cast<uint32_t>(ep.task.target_color));
    put(f, static_cast<uint32_t>(ep.task.target_shape));
    put(f, static_cast<int32_t>(ep.task.goal_side));
    put_rect(f, ep.task.goal_region);
    put(f, ep.seed);
    put(f, static_cast<uint32_t>(ep.succeeded ? 1 : 0));
    // initial world
    put_vec2(f, ep.init_world.gripper.pos);
    put(f, ep.init_world.gripper.grip);
    put(f, static_cast<int32_t>(ep.init_world.gripper.held));
    put_rect(f, ep.init_world.bin);
    put(f, static_cast<int32_t>(ep.init_world.goal_side));
    put(f, static_cast<uint32_t>(ep.init_world.objects.size()));
    for (const auto& o : ep.init_world.objects) {
        put(f, static_cast<int32_t>(o.id));
        put(f, static_cast<uint32_t>(o.shape));
        put(f, static_cast<uint32_t>(o.color));
        put_vec2(f, o.center);
        put(f, o.radius);
    }
    // instruction tokens
    put(f, static_cast<uint32_t>(ep.tokens.size()));
    for (int32_t t : ep.tokens) put(f, t);
    // frames
    const uint32_t T = static_cast<uint32_t>(ep.length());
    put(f, T);
    for (uint32_t t = 0; t < T; ++t) {
        f.write(reinterpret_cast<const char*>(ep.static_frames[t].rgb.data()),
                static_cast<std::streamsize>(ep.static_frames[t].rgb.size()));
        f.write(reinterpret_cast<const char*>(ep.gripper_frames[t].rgb.data()),
                static_cast<std::streamsize>(ep.gripper_frames[t].rgb.size()));
        for (float v : ep.states[t]) put(f, v);
        for (float v : ep.actions[t]) put(f, v);
    }
    if (!f) throw IoError("short write: " + path);
}

Episode read_episode(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad magic in " + path);
    const uint32_t version = get<uint32_t>(f);
    if (version != kVersion) throw IoError("unsupported episode version in " + path);
    Episode ep;
    ep.task.kind = static_cast<TaskKind>(get<uint32_t>(f));
    ep.task.target_color = static_cast<int>(get<uint32_t>(f));
    ep.task.target_shape = static_cast<ObjShape>(get<uint32_t>(f));
    ep.task.goal_side = get<int32_t>(f);
    ep.task.goal_region = get_rect(f);
    ep.seed = get<uint64_t>(f);
    ep.succeeded = get<uint32_t>(f) != 0;
    ep.init_world.gripper.pos = get_vec2(f);
    ep.init_world.gripper.grip = get<double>(f);
    ep.init_world.gripper.held = get<int32_t>(f);
    ep.init_world.bin = get_rect(f);
    ep.init_world.goal_side = get<int32_t>(f);
    const uint32_t n_obj = get<uint32_t>(f);
    for (uint32_t i = 0; i < n_obj; ++i) {
        SimObject o;
        o.id = get<int32_t>(f);
        o.shape = static_cast<ObjShape>(get<uint32_t>(f));
        o.color = static_cast<int>(get<uint32_t>(f));
        o.center = get_vec2(f);
        o.radius = get<double>(f);
        ep.init_world.objects.push_back(o);
    }
    const uint32_t n_tok = get<uint32_t>(f);
    for (uint32_t i = 0; i < n_tok; ++i) ep.tokens.push_back(get<int32_t>(f));
    const uint32_t T = get<uint32_t>(f);
    ep.static_frames.resize(T);
    ep.gripper_frames.resize(T);
    ep.states.resize(T);
    ep.actions.resize(T);
    for (uint32_t t = 0; t < T; ++t) {
        ep.static_frames[t].h = ep.static_frames[t].w = simc::kStaticRes;
        ep.static_frames[t].rgb.resize(simc::kStaticRes * simc::kStaticRes * 3);
        f.read(reinterpret_cast<char*>(ep.static_frames[t].rgb.data()),
               static_cast<std::streamsize>(ep.static_frames[t].rgb.size()));
        ep.gripper_frames[t].h = ep.gripper_frames[t].w = simc::kGripperRes;
        ep.gripper_frames[t].rgb.resize(simc::kGripperRes * simc::kGripperRes * 3);
        f.read(reinterpret_cast<char*>(ep.gripper_frames[t].rgb.data()),
               static_cast<std::streamsize>(ep.gripper_frames[t].rgb.size()));
        for (int i = 0; i < 4; ++i) ep.states[t][i] = get<float>(f);
        for (int i = 0; i < 3; ++i) ep.actions[t][i] = get<float>(f);
    }
    if (!f) throw IoError("truncated episode file: " + path);
    return ep;
}

Episode generate_episode(RngStream rng, const WorldState* continue_from) {
    Episode ep;
    ep.seed = rng.seed();
    WorldState ws;
    if (continue_from) {
        ws = *continue_from;
        ws.step_count = 0;
        ep.task = sample_task_on_world(ws, rng);
        ws.goal_side = ep.task.goal_side;
    } else {
        ResetResult r = reset(rng);
        ws = r.world;
        ep.task = r.task;
    }
    ep.tokens = instruction_tokens(ep.task);
    ep.init_world = ws;

    for (int t = 0; t <= simc::kMaxEpisodeSteps; ++t) {
        ep.static_frames.push_back(quantize(render_static(ws).frame));
        ep.gripper_frames.push_back(quantize(render_gripper_view(ws)));
        ep.states.push_back({static_cast<float>(ws.gripper.pos.x),
                             static_cast<float>(ws.gripper.pos.y),
                             static_cast<float>(ws.gripper.grip),
                             ws.gripper.held >= 0 ? 1.f : 0.f});
        if (success(ws, ep.task)) {
            ep.actions.push_back({0.f, 0.f, static_cast<float>(ws.gripper.grip)});
            ep.succeeded = true;
            break;
        }
        ExpertOut ex = scripted_expert(ws, ep.task);
        // quantize to the stored precision first so replays are exact
        const std::array<float, 3> a{static_cast<float>(ex.action.dx),
                                     static_cast<float>(ex.action.dy),
                                     static_cast<float>(ex.action.grip)};
        ep.actions.push_back(a);
        step(ws, SimAction{a[0], a[1], a[2]});
    }
    if (!ep.succeeded) ep.actions.resize(ep.states.size());  // keep lengths aligned
    return ep;
}

void generate_dataset(int num_episodes, RngStream rng, const std::string& out_dir) {
    if (num_episodes <= 0) throw ConfigError("number of episodes must be positive");
    fs::create_directories(out_dir);
    std::ostringstream index;
    std::optional<WorldState> carry;
    for (int i = 0; i < num_episodes; ++i) {
        Episode ep;
        bool ok = false;
        for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
            RngStream ep_rng = rng.derive("episode", static_cast<uint64_t>(i) * 16 + attempt);
            const bool chain = carry.has_value() && ep_rng.derive("chain").uniform() < 0.5;
            ep = generate_episode(ep_rng, chain ? &*carry : nullptr);
            ok = ep.succeeded;
        }
        if (!ok) throw ContractError("expert failed to produce a successful episode at index " +
                                     std::to_string(i));
        // carry the end state forward for possible chaining
        {
            WorldState ws = ep.init_world;
            for (int t = 0; t + 1 < ep.length(); ++t)
                step(ws, SimAction{ep.actions[t][0], ep.actions[t][1], ep.actions[t][2]});
            carry = ws;
        }
        const std::string name = episode_filename(i);
        const std::string path = (fs::path(out_dir) / name).string();
        try {
            write_episode(path, ep);
        } catch (const IoError& e) {
            throw IoError(std::string(e.what()) + " (episode " + std::to_string(i) + ")");
        }
        index << name << " 0 " << fs::file_size(path) << " " << task_kind_name(ep.task.kind)
              << " " << ep.length() << "\n";
    }
    std::ofstream idx(fs::path(out_dir) / "episodes.idx");
    if (!idx) throw IoError("cannot write index in " + out_dir);
    idx << index.str();
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream idx(fs::path(dir) / "episodes.idx");
    if (!idx) throw IoError("missing episodes.idx in " + dir);
    Dataset ds;
    std::string line;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name;
        ls >> name;
        ds.episodes.push_back(read_episode((fs::path(dir) / name).string()));
    }
    if (ds.episodes.empty()) throw IoError("empty dataset in " + dir);
    ds.compute_action_stats();
    ds.build_world_caches();
    return ds;
}

int clamp_offset(const Episode& ep, int t, int k) {
    return std::min(k, ep.length() - 1 - t);
}

PixelMotion episode_flow(const Episode& ep, int t, int k) {
    const int k_eff = clamp_offset(ep, t, k);
    const IdBuffer ids = render_ids(ep.worlds[t]);
    return analytic_flow(ep.worlds[t], ep.worlds[t + k_eff], ids);
}

}  // namespace dawn
