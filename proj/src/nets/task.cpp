#include "rdc/task.hpp"

#include "rdc/errors.hpp"

namespace rdc {

std::string_view task_name(Task t) {
  switch (t) {
    case Task::seg: return "seg";
    case Task::depth: return "depth";
    case Task::normal: return "normal";
  }
  throw ConfigError("unknown task id " + std::to_string(static_cast<std::size_t>(t)));
}

Task parse_task(std::string_view name) {
  for (Task t : kAllTasks)
    if (task_name(t) == name) return t;
  throw ConfigError("unknown task '" + std::string(name) + "' (valid: seg, depth, normal)");
}

std::size_t task_channels(Task t, std::size_t num_classes) {
  switch (t) {
    case Task::seg: return num_classes;
    case Task::depth: return 1;
    case Task::normal: return 3;
  }
  throw ConfigError("unknown task id " + std::to_string(static_cast<std::size_t>(t)));
}

}  // namespace rdc
