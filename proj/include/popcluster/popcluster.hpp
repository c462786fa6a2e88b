#pragma once

// Umbrella header for the popcluster library: PCA reduction, full-covariance
// Gaussian mixture fitting with BIC model-order selection, stability
// analysis, cluster-interpretation metrics, PCA diagnostics, and the
// synthetic validation generator.

#include "popcluster/common.hpp"
#include "popcluster/config.hpp"
#include "popcluster/csv.hpp"
#include "popcluster/dataset.hpp"
#include "popcluster/diagnostics.hpp"
#include "popcluster/gmm.hpp"
#include "popcluster/interpret.hpp"
#include "popcluster/pca.hpp"
#include "popcluster/pipeline.hpp"
#include "popcluster/selection.hpp"
#include "popcluster/serialize.hpp"
#include "popcluster/synth.hpp"
