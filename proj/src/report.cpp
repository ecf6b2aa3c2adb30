// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/report.hpp"
