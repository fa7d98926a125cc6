#include "mtfuse/types.hpp"

namespace mtfuse {

std::string_view task_name(TaskId t) {
  switch (t) {
    case TaskId::kDer: return "der";
    case TaskId::kDbr: return "dbr";
    case TaskId::kTcr: return "tcr";
    case TaskId::kVbr: return "vbr";
  }
  return "?";
}

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::kExterior: return "exterior";
    case Modality::kInterior: return "interior";
    case Modality::kJoints: return "joints";
  }
  return "?";
}

std::string_view view_name(ViewId v) {
  switch (v) {
    case ViewId::kFront: return "front";
    case ViewId::kLeft: return "left";
    case ViewId::kRight: return "right";
    case ViewId::kInside: return "inside";
    case ViewId::kFace: return "face";
    case ViewId::kBody: return "body";
  }
  return "?";
}

bool parse_task(std::string_view name, TaskId& out) {
  for (auto t : kAllTasks) {
    if (task_name(t) == name) {
      out = t;
      return true;
    }
  }
  return false;
}

bool parse_modality(std::string_view name, Modality& out) {
  for (auto m : kAllModalities) {
    if (modality_name(m) == name) {
      out = m;
      return true;
    }
  }
  return false;
}

}  // namespace mtfuse
