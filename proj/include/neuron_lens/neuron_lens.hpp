#pragma once

#include <neuron_lens/ablate.hpp>
#include <neuron_lens/calibrate.hpp>
#include <neuron_lens/elastic_net.hpp>
#include <neuron_lens/error.hpp>
#include <neuron_lens/explain.hpp>
#include <neuron_lens/fixture.hpp>
#include <neuron_lens/parallel.hpp>
#include <neuron_lens/pipeline.hpp>
#include <neuron_lens/report.hpp>
#include <neuron_lens/simulate.hpp>
#include <neuron_lens/stats.hpp>
#include <neuron_lens/tensor_io.hpp>
