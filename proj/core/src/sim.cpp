#include "dawn/sim.hpp"

#include <algorithm>
#include <cmath>

#include "dawn/common.hpp"

namespace dawn {

using namespace simc;

double Vec2::norm() const { return std::sqrt(x * x + y * y); }

Vec2 Vec2::clamped_norm(double max_len) const {
    double n = norm();
    if (n <= max_len || n == 0.0) return *this;
    return {x * max_len / n, y * max_len / n};
}

const SimObject* WorldState::object_by_id(int id) const {
    for (const auto& o : objects)
        if (o.id == id) return &o;
    return nullptr;
}

SimObject* WorldState::object_by_id(int id) {
    for (auto& o : objects)
        if (o.id == id) return &o;
    return nullptr;
}

// ---------------------------------------------------------------- names

const std::vector<std::string>& Vocab::words() {
    static const std::vector<std::string> w = {
        "<pad>", "the",  "lift",   "put",  "push",    "in",   "bin",
        "left",  "right", "up",    "down", "red",     "green", "blue",
        "yellow", "magenta", "cyan", "circle", "square"};
    return w;
}

int32_t Vocab::id(const std::string& word) {
    const auto& w = words();
    for (size_t i = 0; i < w.size(); ++i)
        if (w[i] == word) return static_cast<int32_t>(i);
    throw ContractError("unknown vocabulary word: " + word);
}

int Vocab::size() { return static_cast<int>(words().size()); }

std::string Vocab::decode(const std::vector<int32_t>& ids) {
    std::string out;
    for (int32_t id : ids) {
        if (id == 0) continue;
        if (!out.empty()) out += ' ';
        out += words().at(id);
    }
    return out;
}

const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::lift: return "lift";
        case TaskKind::place_in_bin: return "place";
        default: return "push";
    }
}

const char* color_name(int color) {
    static const char* names[kNumColors] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
    return names[color];
}

const char* shape_name(ObjShape s) { return s == ObjShape::circle ? "circle" : "square"; }

std::array<float, 3> color_rgb(int color) {
    static const std::array<float, 3> rgb[kNumColors] = {
        {0.85f, 0.12f, 0.12f}, {0.10f, 0.72f, 0.18f}, {0.15f, 0.28f, 0.88f},
        {0.92f, 0.86f, 0.10f}, {0.80f, 0.15f, 0.80f}, {0.10f, 0.78f, 0.80f}};
    return rgb[color];
}

Rect goal_strip(int side) {
    switch (side) {
        case 0: return {{0.0, 0.0}, {kStripWidth, 1.0}};          // left
        case 1: return {{1.0 - kStripWidth, 0.0}, {1.0, 1.0}};    // right
        case 2: return {{0.0, 0.0}, {1.0, kStripWidth}};          // up
        default: return {{0.0, 1.0 - kStripWidth}, {1.0, 1.0}};   // down
    }
}

std::vector<int32_t> instruction_tokens(const Task& task) {
    std::vector<int32_t> t;
    switch (task.kind) {
        case TaskKind::lift:
            t = {Vocab::id("lift"), Vocab::id("the"), Vocab::id(color_name(task.target_color)),
                 Vocab::id(shape_name(task.target_shape))};
            break;
        case TaskKind::place_in_bin:
            t = {Vocab::id("put"), Vocab::id("the"), Vocab::id(color_name(task.target_color)),
                 Vocab::id(shape_name(task.target_shape)), Vocab::id("in"), Vocab::id("the"),
                 Vocab::id("bin")};
            break;
        default: {
            static const char* dirs[4] = {"left", "right", "up", "down"};
            t = {Vocab::id("push"), Vocab::id("the"), Vocab::id(color_name(task.target_color)),
                 Vocab::id(shape_name(task.target_shape)), Vocab::id(dirs[task.goal_side])};
            break;
        }
    }
    t.resize(kMaxTokens, 0);
    return t;
}

// ---------------------------------------------------------------- reset

namespace {

const Rect kBin{{0.72, 0.04}, {0.96, 0.28}};

bool clear_of_regions(Vec2 c, double r, const WorldState& ws) {
    // keep spawn positions out of the bin and the goal strip
    Rect grown{{kBin.lo.x - r, kBin.lo.y - r}, {kBin.hi.x + r, kBin.hi.y + r}};
    if (grown.contains(c)) return false;
    if (ws.goal_side >= 0) {
        Rect strip = goal_strip(ws.goal_side);
        Rect g2{{strip.lo.x - r, strip.lo.y - r}, {strip.hi.x + r, strip.hi.y + r}};
        if (g2.contains(c)) return false;
    }
    return true;
}

}  // namespace

ResetResult reset(RngStream& rng) {
    ResetResult out;
    WorldState& ws = out.world;
    ws.bin = kBin;

    const int n_obj = kMinObjects + static_cast<int>(rng.uniform_int(kMaxObjects - kMinObjects + 1));
    Task& task = out.task;
    task.kind = static_cast<TaskKind>(rng.uniform_int(3));
    task.target_color = static_cast<int>(rng.uniform_int(kNumColors));
    task.target_shape = static_cast<ObjShape>(rng.uniform_int(2));
    if (task.kind == TaskKind::push_to_region) {
        task.goal_side = static_cast<int>(rng.uniform_int(4));
        task.goal_region = goal_strip(task.goal_side);
        ws.goal_side = task.goal_side;
    }

    // distinct (color, shape) combos; the target combo appears exactly once
    std::vector<std::pair<int, ObjShape>> combos;
    for (int c = 0; c < kNumColors; ++c)
        for (int s = 0; s < 2; ++s)
            if (!(c == task.target_color && static_cast<ObjShape>(s) == task.target_shape))
                combos.emplace_back(c, static_cast<ObjShape>(s));
    for (int i = static_cast<int>(combos.size()) - 1; i > 0; --i)
        std::swap(combos[i], combos[rng.uniform_int(i + 1)]);
    std::vector<std::pair<int, ObjShape>> chosen;
    chosen.emplace_back(task.target_color, task.target_shape);
    for (int i = 0; i < n_obj - 1; ++i) chosen.push_back(combos[i]);

    for (int i = 0; i < n_obj; ++i) {
        SimObject obj;
        obj.id = i + 1;
        obj.color = chosen[i].first;
        obj.shape = chosen[i].second;
        obj.radius = rng.uniform(kMinRadius, kMaxRadius);
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            Vec2 c{rng.uniform(obj.radius, 1.0 - obj.radius),
                   rng.uniform(obj.radius, 1.0 - obj.radius)};
            if (!clear_of_regions(c, obj.radius, ws)) continue;
            bool overlap = false;
            for (const auto& other : ws.objects)
                if ((c - other.center).norm() <= obj.radius + other.radius + 0.01) overlap = true;
            if (overlap) continue;
            obj.center = c;
            placed = true;
        }
        if (!placed) throw ContractError("object placement failed after 100 tries");
        ws.objects.push_back(obj);
    }

    bool gplaced = false;
    for (int attempt = 0; attempt < 100 && !gplaced; ++attempt) {
        Vec2 p{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
        bool overlap = false;
        for (const auto& o : ws.objects)
            if ((p - o.center).norm() <= o.radius + kGripperHalf + 0.01) overlap = true;
        if (!overlap) {
            ws.gripper.pos = p;
            gplaced = true;
        }
    }
    if (!gplaced) throw ContractError("gripper placement failed after 100 tries");
    return out;
}

Task sample_task_on_world(const WorldState& ws, RngStream& rng) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        Task t;
        t.kind = static_cast<TaskKind>(rng.uniform_int(3));
        const SimObject& obj = ws.objects[rng.uniform_int(ws.objects.size())];
        t.target_color = obj.color;
        t.target_shape = obj.shape;
        if (t.kind == TaskKind::lift) {
            if (ws.gripper.held == obj.id) continue;  // would be trivially done
            return t;
        }
        if (t.kind == TaskKind::place_in_bin) {
            if (ws.bin.contains(obj.center)) continue;
            return t;
        }
        t.goal_side = static_cast<int>(rng.uniform_int(4));
        t.goal_region = goal_strip(t.goal_side);
        if (t.goal_region.contains(obj.center)) continue;
        return t;
    }
    // fall back to lifting any non-held object
    Task t;
    t.kind = TaskKind::lift;
    for (const auto& o : ws.objects)
        if (o.id != ws.gripper.held) {
            t.target_color = o.color;
            t.target_shape = o.shape;
            return t;
        }
    t.target_color = ws.objects[0].color;
    t.target_shape = ws.objects[0].shape;
    return t;
}

// ---------------------------------------------------------------- step

void step(WorldState& ws, const SimAction& a) {
    const double dx = std::clamp(a.dx, -kAmax, kAmax);
    const double dy = std::clamp(a.dy, -kAmax, kAmax);
    const double gcmd = std::clamp(a.grip, 0.0, 1.0);

    // grasp / release on the 0.5 crossing, evaluated at the current position
    if (ws.gripper.grip < 0.5 && gcmd >= 0.5) {
        int best = -1;
        double best_d = 1e9;
        for (const auto& o : ws.objects) {
            const double d = (o.center - ws.gripper.pos).norm();
            if (d <= kGraspRadiusFactor * o.radius && d < best_d) {
                best = o.id;
                best_d = d;
            }
        }
        ws.gripper.held = best;
    } else if (ws.gripper.grip >= 0.5 && gcmd < 0.5) {
        ws.gripper.held = -1;
    }
    ws.gripper.grip = gcmd;

    Vec2 np{ws.gripper.pos.x + dx, ws.gripper.pos.y + dy};
    np.x = std::clamp(np.x, kGripperHalf, 1.0 - kGripperHalf);
    np.y = std::clamp(np.y, kGripperHalf, 1.0 - kGripperHalf);
    ws.gripper.pos = np;

    SimObject* held = ws.gripper.held >= 0 ? ws.object_by_id(ws.gripper.held) : nullptr;
    if (held) held->center = ws.gripper.pos;

    // Push resolution. An open gripper is a claw that straddles objects and
    // passes over them; only a closed gripper (or the object it carries)
    // displaces contacted objects.
    const bool closed = ws.gripper.grip >= 0.5;
    for (auto& o : ws.objects) {
        if (held && o.id == held->id) continue;
        if (closed) {
            const double contact = o.radius + kGripperHalf;
            Vec2 d = o.center - ws.gripper.pos;
            double n = d.norm();
            if (n < contact) {
                Vec2 dir = n > 1e-9 ? Vec2{d.x / n, d.y / n} : Vec2{1.0, 0.0};
                o.center = ws.gripper.pos + dir * contact;
            }
        }
        if (held) {
            const double contact = o.radius + held->radius;
            Vec2 d = o.center - held->center;
            double n = d.norm();
            if (n < contact) {
                Vec2 dir = n > 1e-9 ? Vec2{d.x / n, d.y / n} : Vec2{1.0, 0.0};
                o.center = held->center + dir * contact;
            }
        }
        o.center.x = std::clamp(o.center.x, o.radius, 1.0 - o.radius);
        o.center.y = std::clamp(o.center.y, o.radius, 1.0 - o.radius);
    }
    ++ws.step_count;
}

// ---------------------------------------------------------------- render

namespace {

struct Painter {
    ImageF* img = nullptr;   // optional
    IdBuffer* ids = nullptr; // optional
    int res;
    // window mapping: pixel (y,x) center -> world (wx0 + (x+0.5)*scale, ...)
    double wx0, wy0, scale;

    void fill_rect(Vec2 lo, Vec2 hi, std::array<float, 3> col, int id) {
        int x0 = std::max(0, static_cast<int>(std::floor((lo.x - wx0) / scale)));
        int y0 = std::max(0, static_cast<int>(std::floor((lo.y - wy0) / scale)));
        int x1 = std::min(res - 1, static_cast<int>(std::ceil((hi.x - wx0) / scale)));
        int y1 = std::min(res - 1, static_cast<int>(std::ceil((hi.y - wy0) / scale)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double px = wx0 + (x + 0.5) * scale;
                const double py = wy0 + (y + 0.5) * scale;
                if (px < lo.x || px > hi.x || py < lo.y || py > hi.y) continue;
                paint(y, x, col, id);
            }
    }

    void fill_circle(Vec2 c, double r, std::array<float, 3> col, int id) {
        int x0 = std::max(0, static_cast<int>(std::floor((c.x - r - wx0) / scale)));
        int y0 = std::max(0, static_cast<int>(std::floor((c.y - r - wy0) / scale)));
        int x1 = std::min(res - 1, static_cast<int>(std::ceil((c.x + r - wx0) / scale)));
        int y1 = std::min(res - 1, static_cast<int>(std::ceil((c.y + r - wy0) / scale)));
        const double r2 = r * r;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double px = wx0 + (x + 0.5) * scale - c.x;
                const double py = wy0 + (y + 0.5) * scale - c.y;
                if (px * px + py * py > r2) continue;
                paint(y, x, col, id);
            }
    }

    void paint(int y, int x, std::array<float, 3> col, int id) {
        if (img) {
            float* p = img->px(y, x);
            p[0] = col[0];
            p[1] = col[1];
            p[2] = col[2];
        }
        if (ids) ids->ids[y * res + x] = id;
    }
};

void draw_world(Painter& p, const WorldState& ws) {
    if (ws.goal_side >= 0) {
        Rect s = goal_strip(ws.goal_side);
        p.fill_rect(s.lo, s.hi, {0.82f, 0.88f, 0.82f}, 0);
    }
    // bin: light fill with a dark border
    p.fill_rect(ws.bin.lo, ws.bin.hi, {0.45f, 0.33f, 0.22f}, 0);
    const double bw = 0.02;
    p.fill_rect({ws.bin.lo.x + bw, ws.bin.lo.y + bw}, {ws.bin.hi.x - bw, ws.bin.hi.y - bw},
                {0.88f, 0.82f, 0.72f}, 0);
    for (const auto& o : ws.objects) {
        if (o.shape == ObjShape::circle)
            p.fill_circle(o.center, o.radius, color_rgb(o.color), o.id);
        else
            p.fill_rect({o.center.x - o.radius, o.center.y - o.radius},
                        {o.center.x + o.radius, o.center.y + o.radius}, color_rgb(o.color), o.id);
    }
    // gripper on top; the footprint is grip-invariant so pixel ownership
    // tracks pure translation, only the shade flips between open and closed
    const std::array<float, 3> gcol = ws.gripper.grip >= 0.5
                                          ? std::array<float, 3>{0.10f, 0.10f, 0.12f}
                                          : std::array<float, 3>{0.52f, 0.52f, 0.58f};
    const Vec2 gp = ws.gripper.pos;
    const double gh = kGripperHalf;
    p.fill_rect({gp.x - gh, gp.y - gh}, {gp.x + gh, gp.y + gh}, gcol, ws.gripper_entity_id());
}

constexpr std::array<float, 3> kBackground{0.93f, 0.93f, 0.90f};

}  // namespace

RenderOut render_static(const WorldState& ws) {
    RenderOut out;
    out.frame = ImageF::filled(kStaticRes, kStaticRes, kBackground[0], kBackground[1], kBackground[2]);
    out.ids.h = out.ids.w = kStaticRes;
    out.ids.ids.assign(kStaticRes * kStaticRes, 0);
    Painter p{&out.frame, &out.ids, kStaticRes, 0.0, 0.0, 1.0 / kStaticRes};
    draw_world(p, ws);
    return out;
}

IdBuffer render_ids(const WorldState& ws) {
    IdBuffer ids;
    ids.h = ids.w = kStaticRes;
    ids.ids.assign(kStaticRes * kStaticRes, 0);
    Painter p{nullptr, &ids, kStaticRes, 0.0, 0.0, 1.0 / kStaticRes};
    draw_world(p, ws);
    return ids;
}

ImageF render_gripper_view(const WorldState& ws) {
    const double span = 1.0 / kGripperZoom * (static_cast<double>(kGripperRes) / kStaticRes);
    // 32 px at 2x zoom covers 0.25 workspace units
    double cx = std::clamp(ws.gripper.pos.x, span / 2, 1.0 - span / 2);
    double cy = std::clamp(ws.gripper.pos.y, span / 2, 1.0 - span / 2);
    ImageF img = ImageF::filled(kGripperRes, kGripperRes, kBackground[0], kBackground[1],
                                kBackground[2]);
    Painter p{&img, nullptr, kGripperRes, cx - span / 2, cy - span / 2, span / kGripperRes};
    draw_world(p, ws);
    return img;
}

Observation observe(const WorldState& ws, const Task& task) {
    Observation obs;
    obs.static_frame = render_static(ws).frame;
    obs.gripper_frame = render_gripper_view(ws);
    obs.state = {static_cast<float>(ws.gripper.pos.x), static_cast<float>(ws.gripper.pos.y),
                 static_cast<float>(ws.gripper.grip), ws.gripper.held >= 0 ? 1.f : 0.f};
    obs.tokens = instruction_tokens(task);
    return obs;
}

// ---------------------------------------------------------------- flow

PixelMotion analytic_flow(const WorldState& ws_t, const WorldState& ws_tk, const IdBuffer& ids_t) {
    PixelMotion m = PixelMotion::zeros(ids_t.h, ids_t.w);
    const int n_entities = static_cast<int>(ws_t.objects.size()) + 2;
    std::vector<float> du(n_entities, 0.f), dv(n_entities, 0.f);
    for (const auto& o : ws_t.objects) {
        const SimObject* o2 = ws_tk.object_by_id(o.id);
        if (!o2) throw ContractError("analytic_flow: mismatched episodes");
        du[o.id] = static_cast<float>((o2->center.x - o.center.x) * ids_t.w);
        dv[o.id] = static_cast<float>((o2->center.y - o.center.y) * ids_t.h);
    }
    const int gid = ws_t.gripper_entity_id();
    du[gid] = static_cast<float>((ws_tk.gripper.pos.x - ws_t.gripper.pos.x) * ids_t.w);
    dv[gid] = static_cast<float>((ws_tk.gripper.pos.y - ws_t.gripper.pos.y) * ids_t.h);
    for (int64_t i = 0; i < m.numel(); ++i) {
        const int32_t id = ids_t.ids[i];
        m.u[i] = du[id];
        m.v[i] = dv[id];
    }
    return m;
}

// ---------------------------------------------------------------- success

int find_target(const WorldState& ws, const Task& task) {
    for (const auto& o : ws.objects)
        if (o.color == task.target_color && o.shape == task.target_shape) return o.id;
    return -1;
}

bool success(const WorldState& ws, const Task& task) {
    const int tid = find_target(ws, task);
    if (tid < 0) return false;
    const SimObject* target = ws.object_by_id(tid);
    switch (task.kind) {
        case TaskKind::lift:
            return ws.gripper.held == tid;
        case TaskKind::place_in_bin:
            return ws.bin.contains(target->center) && ws.gripper.grip < 0.5;
        default:
            return task.goal_region.contains(target->center);
    }
}

bool wrong_object(const WorldState& ws, const Task& task) {
    const int tid = find_target(ws, task);
    return ws.gripper.held >= 0 && ws.gripper.held != tid;
}

// ---------------------------------------------------------------- expert

namespace {

SimAction move_toward(const WorldState& ws, Vec2 goal, double grip) {
    Vec2 d = goal - ws.gripper.pos;
    // step at most the remaining distance so close approaches settle
    Vec2 v = (d * 4.0).clamped_norm(std::min(kAmax, d.norm()));
    return {v.x, v.y, grip};
}

Vec2 push_dir(int side) {
    switch (side) {
        case 0: return {-1.0, 0.0};
        case 1: return {1.0, 0.0};
        case 2: return {0.0, -1.0};
        default: return {0.0, 1.0};
    }
}

}  // namespace

ExpertOut scripted_expert(const WorldState& ws, const Task& task) {
    const int tid = find_target(ws, task);
    if (tid < 0) return {{0, 0, ws.gripper.grip}, true};
    const SimObject* target = ws.object_by_id(tid);

    if (success(ws, task))
        return {{0, 0, task.kind == TaskKind::lift ? 1.0 : 0.0}, false};

    // drop anything that is not needed
    if (ws.gripper.held >= 0 && ws.gripper.held != tid) return {{0, 0, 0.0}, false};

    switch (task.kind) {
        case TaskKind::lift: {
            const double d = (target->center - ws.gripper.pos).norm();
            if (d < 0.5 * target->radius) return {{0, 0, 1.0}, false};
            return {move_toward(ws, target->center, 0.0), false};
        }
        case TaskKind::place_in_bin: {
            if (ws.gripper.held == tid) {
                Vec2 c = ws.bin.center();
                if ((c - ws.gripper.pos).norm() < 0.05) return {{0, 0, 0.0}, false};  // release
                return {move_toward(ws, c, 1.0), false};
            }
            const double d = (target->center - ws.gripper.pos).norm();
            if (d < 0.5 * target->radius) return {{0, 0, 1.0}, false};
            return {move_toward(ws, target->center, 0.0), false};
        }
        default: {
            // Close the claw somewhere no grasp can latch, then approach
            // from behind (a closed claw bulldozes whatever it meets) and
            // shove the target into the strip.
            const Vec2 dir = push_dir(task.goal_side);
            const double contact = target->radius + kGripperHalf;
            Vec2 standoff = target->center - dir * (contact + 0.03);
            standoff.x = std::clamp(standoff.x, kGripperHalf, 1.0 - kGripperHalf);
            standoff.y = std::clamp(standoff.y, kGripperHalf, 1.0 - kGripperHalf);
            if (ws.gripper.grip >= 0.5) {
                const double off = (standoff - ws.gripper.pos).norm();
                if (off > 0.03) return {move_toward(ws, standoff, 1.0), false};
                return {{dir.x * kAmax, dir.y * kAmax, 1.0}, false};
            }
            const SimObject* nearest = nullptr;
            double gap = 1e9;
            for (const auto& o : ws.objects) {
                const double g = (o.center - ws.gripper.pos).norm() - kGraspRadiusFactor * o.radius;
                if (g < gap) {
                    gap = g;
                    nearest = &o;
                }
            }
            if (gap > 0.02) return {{0, 0, 1.0}, false};  // safe to close
            Vec2 away = ws.gripper.pos - nearest->center;
            const double n = away.norm();
            away = n > 1e-9 ? away * (1.0 / n) : Vec2{1.0, 0.0};
            return {{away.x * kAmax, away.y * kAmax, 0.0}, false};
        }
    }
}

}  // namespace dawn
