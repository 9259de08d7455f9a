#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace rdc {

enum class Task : std::size_t { seg = 0, depth = 1, normal = 2 };

inline constexpr std::size_t kNumTasks = 3;
inline constexpr std::array<Task, kNumTasks> kAllTasks{Task::seg, Task::depth, Task::normal};

// Bit i set = task i labeled (or selected).
using TaskSet = std::uint32_t;

// Segmentation label value for pixels without a class.
inline constexpr std::uint32_t kSegIgnore = 255;

inline constexpr std::size_t task_index(Task t) { return static_cast<std::size_t>(t); }
inline constexpr TaskSet task_bit(Task t) { return TaskSet{1} << task_index(t); }
inline constexpr TaskSet kAllTaskBits = (TaskSet{1} << kNumTasks) - 1;

std::string_view task_name(Task t);
// Throws ConfigError listing the valid names.
Task parse_task(std::string_view name);
// Channel count of a task's prediction and adapter input.
std::size_t task_channels(Task t, std::size_t num_classes);

}  // namespace rdc
