#pragma once

#include "common.hpp"
#include "dataset.hpp"
#include "detection.hpp"
#include "features.hpp"
#include "image.hpp"
#include "linear_head.hpp"
#include "perturbation.hpp"
#include "pipeline.hpp"
#include "ranking.hpp"
#include "report.hpp"
#include "synthetic.hpp"
