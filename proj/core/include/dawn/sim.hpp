#pragma once

#include <array>
#include <string>
#include <vector>

#include "dawn/image.hpp"
#include "dawn/motion.hpp"
#include "dawn/rng.hpp"

namespace dawn {

// Deterministic 2D tabletop: continuous [0,1]^2 workspace, a point gripper
// with a grasp latch, rigid circle/square objects, a bin region, and
// optional push-goal strips. Everything is a pure function of (seed, action
// sequence).
namespace simc {
inline constexpr int kStaticRes = 64;
inline constexpr int kGripperRes = 32;
inline constexpr double kGripperZoom = 2.0;  // gripper view covers 1/(2) of the frame span
inline constexpr double kAmax = 0.05;
inline constexpr double kGraspRadiusFactor = 1.5;
inline constexpr double kGripperHalf = 0.04;
inline constexpr int kMinObjects = 3;
inline constexpr int kMaxObjects = 5;
inline constexpr double kMinRadius = 0.055;
inline constexpr double kMaxRadius = 0.075;
inline constexpr int kMaxEpisodeSteps = 200;
inline constexpr int kMaxTokens = 8;
inline constexpr int kNumColors = 6;
inline constexpr double kStripWidth = 0.18;
}  // namespace simc

struct Vec2 {
    double x = 0, y = 0;
    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double norm() const;
    Vec2 clamped_norm(double max_len) const;
};

struct Rect {
    Vec2 lo, hi;
    bool contains(Vec2 p) const { return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y; }
    Vec2 center() const { return {(lo.x + hi.x) / 2, (lo.y + hi.y) / 2}; }
};

enum class ObjShape { circle = 0, square = 1 };

struct SimObject {
    int id = 0;  // 1-based; the id buffer uses 0 for background
    ObjShape shape = ObjShape::circle;
    int color = 0;
    Vec2 center;
    double radius = 0.06;
};

struct Gripper {
    Vec2 pos;
    double grip = 0.0;
    int held = -1;  // object id or -1
};

struct WorldState {
    Gripper gripper;
    std::vector<SimObject> objects;
    Rect bin;
    int goal_side = -1;  // 0 left, 1 right, 2 up, 3 down; -1 none (render tint)
    int step_count = 0;

    const SimObject* object_by_id(int id) const;
    SimObject* object_by_id(int id);
    int gripper_entity_id() const { return static_cast<int>(objects.size()) + 1; }
};

enum class TaskKind { lift = 0, place_in_bin = 1, push_to_region = 2 };

struct Task {
    TaskKind kind = TaskKind::lift;
    int target_color = 0;
    ObjShape target_shape = ObjShape::circle;
    int goal_side = -1;   // push only
    Rect goal_region;     // push only
};

struct SimAction {
    double dx = 0, dy = 0, grip = 0;
};

struct IdBuffer {
    int h = 0, w = 0;
    std::vector<int32_t> ids;
    int32_t at(int y, int x) const { return ids[y * w + x]; }
};

struct Observation {
    ImageF static_frame;   // 64x64
    ImageF gripper_frame;  // 32x32, 2x zoom crop centered on the gripper
    std::array<float, 4> state{};  // x, y, grip, held-flag
    std::vector<int32_t> tokens;   // padded to kMaxTokens
};

// Fixed instruction vocabulary (pad = 0).
struct Vocab {
    static const std::vector<std::string>& words();
    static int32_t id(const std::string& w);
    static int size();
    static std::string decode(const std::vector<int32_t>& ids);
};

const char* task_kind_name(TaskKind k);
const char* color_name(int color);
const char* shape_name(ObjShape s);
std::array<float, 3> color_rgb(int color);

struct ResetResult {
    WorldState world;
    Task task;
};

// Places 3-5 non-overlapping objects with distinct (color, shape) combos,
// clear of the bin and the goal strip; throws ContractError after 100
// rejection-sampling failures.
ResetResult reset(RngStream& rng);

// Samples a feasible follow-up task on an existing world (chained
// evaluation and chained data collection).
Task sample_task_on_world(const WorldState& ws, RngStream& rng);

void step(WorldState& ws, const SimAction& a);

struct RenderOut {
    ImageF frame;
    IdBuffer ids;
};
RenderOut render_static(const WorldState& ws);
IdBuffer render_ids(const WorldState& ws);
ImageF render_gripper_view(const WorldState& ws);
Observation observe(const WorldState& ws, const Task& task);

// Forward flow in static-view pixels: each pixel carries the displacement
// of the entity owning it at time t; background stays zero.
PixelMotion analytic_flow(const WorldState& ws_t, const WorldState& ws_tk, const IdBuffer& ids_t);

struct ExpertOut {
    SimAction action;
    bool stalled = false;
};
ExpertOut scripted_expert(const WorldState& ws, const Task& task);

bool success(const WorldState& ws, const Task& task);
bool wrong_object(const WorldState& ws, const Task& task);
int find_target(const WorldState& ws, const Task& task);  // object id or -1

std::vector<int32_t> instruction_tokens(const Task& task);  // padded

Rect goal_strip(int side);

}  // namespace dawn
