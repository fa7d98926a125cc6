#pragma once

#include <array>
#include <cstddef>
#include <string_view>

namespace mtfuse {

inline constexpr std::size_t kNumTasks = 4;
inline constexpr std::size_t kNumModalities = 3;

enum class TaskId : std::size_t { kDer = 0, kDbr = 1, kTcr = 2, kVbr = 3 };
enum class Modality : std::size_t { kExterior = 0, kInterior = 1, kJoints = 2 };
enum class ViewId : std::size_t { kFront = 0, kLeft, kRight, kInside, kFace, kBody };

inline constexpr std::array<TaskId, kNumTasks> kAllTasks = {TaskId::kDer, TaskId::kDbr, TaskId::kTcr, TaskId::kVbr};
inline constexpr std::array<Modality, kNumModalities> kAllModalities = {Modality::kExterior, Modality::kInterior,
                                                                        Modality::kJoints};
inline constexpr std::array<ViewId, 3> kExteriorViews = {ViewId::kFront, ViewId::kLeft, ViewId::kRight};
inline constexpr std::array<ViewId, 3> kInteriorViews = {ViewId::kInside, ViewId::kFace, ViewId::kBody};

std::string_view task_name(TaskId t);
std::string_view modality_name(Modality m);
std::string_view view_name(ViewId v);

/// Inverse lookups; return false on an unknown name.
bool parse_task(std::string_view name, TaskId& out);
bool parse_modality(std::string_view name, Modality& out);

constexpr std::size_t index(TaskId t) { return static_cast<std::size_t>(t); }
constexpr std::size_t index(Modality m) { return static_cast<std::size_t>(m); }

}  // namespace mtfuse
