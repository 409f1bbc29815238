#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dawn/sim.hpp"

namespace dawn {

// One recorded demonstration. Frames are stored quantized; full world
// states are reconstructed at load time by replaying the recorded actions
// through the deterministic simulator.
struct Episode {
    Task task;
    std::vector<int32_t> tokens;  // padded to simc::kMaxTokens
    uint64_t seed = 0;
    bool succeeded = false;
    WorldState init_world;
    std::vector<ImageU8> static_frames;
    std::vector<ImageU8> gripper_frames;
    std::vector<std::array<float, 4>> states;
    std::vector<std::array<float, 3>> actions;

    // replay cache, not serialized
    std::vector<WorldState> worlds;

    int length() const { return static_cast<int>(states.size()); }
};

struct Dataset {
    std::vector<Episode> episodes;
    std::array<float, 3> act_min{}, act_max{};

    int64_t total_frames() const;
    void compute_action_stats();
    void build_world_caches();
};

// EpisodeFile binary IO (little-endian, magic "MMEP").
void write_episode(const std::string& path, const Episode& ep);
Episode read_episode(const std::string& path);

// Runs the scripted expert for one episode, optionally continuing from the
// end state of a previous task; failed attempts are discarded upstream.
Episode generate_episode(RngStream rng, const WorldState* continue_from);

// Writes num_episodes episode files plus the index sidecar into out_dir.
// Roughly half of the episodes continue from the previous end state.
void generate_dataset(int num_episodes, RngStream rng, const std::string& out_dir);

Dataset load_dataset(const std::string& dir);

// Ground-truth flow between frames t and t+k (k clamped at the episode
// boundary), from the replayed world cache.
PixelMotion episode_flow(const Episode& ep, int t, int k);
int clamp_offset(const Episode& ep, int t, int k);

}  // namespace dawn
