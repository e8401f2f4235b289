#pragma once

#include "conceptgraph/attention.hpp"
#include "conceptgraph/clustering.hpp"
#include "conceptgraph/concept_graph.hpp"
#include "conceptgraph/error.hpp"
#include "conceptgraph/image_io.hpp"
#include "conceptgraph/kernel.hpp"
#include "conceptgraph/layer.hpp"
#include "conceptgraph/model.hpp"
#include "conceptgraph/model_io.hpp"
#include "conceptgraph/probe.hpp"
#include "conceptgraph/seeding.hpp"
#include "conceptgraph/sha256.hpp"
#include "conceptgraph/significance.hpp"
#include "conceptgraph/tensor.hpp"
