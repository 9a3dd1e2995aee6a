#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tandem/sim/arm.hpp"

namespace tandem {

/// Flat colors are stored as multiples of 1/256 so pixel values survive a
/// byte-quantized round trip exactly.
struct Rgb {
    double r = 0, g = 0, b = 0;
    static Rgb of_bytes(int r, int g, int b) {
        return {r / 256.0, g / 256.0, b / 256.0};
    }
};

struct Ball {
    Vec2 pos{};
    double radius = 0.015;
    Rgb color;
};

enum class ZoneRole { Source, Target };

struct Zone {
    Vec2 center{};
    double radius = 0.03;
    ZoneRole role = ZoneRole::Source;
    std::string label;  // "up" or "down"
};

struct SceneState {
    std::vector<Ball> balls;
    std::optional<size_t> held_ball;
    std::vector<Zone> zones;
};

struct GraspParams {
    double grasp_radius = 0.02;
    double close_threshold = 0.3;
    double open_threshold = 0.7;
};

/// Threshold attachment rule: closing near a ball grasps it, opening releases
/// it in place; a held ball rides the end effector.
inline SceneState update_scene(SceneState scene, const Vec2& ee_pos, double gripper_open,
                               const GraspParams& p = {}) {
    if (scene.held_ball) {
        scene.balls[*scene.held_ball].pos = ee_pos;
        if (gripper_open > p.open_threshold) scene.held_ball.reset();
        return scene;
    }
    if (gripper_open < p.close_threshold) {
        double best = p.grasp_radius;
        std::optional<size_t> pick;
        for (size_t i = 0; i < scene.balls.size(); ++i) {
            const double d = std::hypot(scene.balls[i].pos[0] - ee_pos[0],
                                        scene.balls[i].pos[1] - ee_pos[1]);
            if (d < best) {
                best = d;
                pick = i;
            }
        }
        if (pick) {
            scene.held_ball = pick;
            scene.balls[*pick].pos = ee_pos;
        }
    }
    return scene;
}

}  // namespace tandem
