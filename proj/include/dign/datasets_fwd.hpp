#pragma once

namespace dign {
struct Dataset;
}
