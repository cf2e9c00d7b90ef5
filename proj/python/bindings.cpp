#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "siftmasks/checkpoint.hpp"
#include "siftmasks/config.hpp"
#include "siftmasks/engine.hpp"
#include "siftmasks/errors.hpp"
#include "siftmasks/merging.hpp"
#include "siftmasks/reports.hpp"

namespace py = pybind11;
using namespace siftmasks;

namespace {

TaskVector to_task_vector(TaskId id, const std::vector<float>& values) {
    TaskVector t;
    t.delta = ParamVector(values);
    t.source_task = id;
    return t;
}

std::vector<TaskVector> to_task_vectors(const std::vector<std::vector<float>>& rows) {
    std::vector<TaskVector> out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.push_back(to_task_vector(static_cast<TaskId>(i), rows[i]));
    }
    return out;
}

std::vector<bool> bools(const BitMask& m) {
    std::vector<bool> b(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        b[i] = m.test(i);
    }
    return b;
}

// A built system plus the config it came from.
class System {
public:
    explicit System(const std::string& config_json) {
        from_json(nlohmann::json::parse(config_json), cfg_);
        cfg_.validate();
        state_ = build_system(load_dataset(cfg_), cfg_);
    }

    std::string unlearn_task(TaskId id) { return to_json(unlearn(state_, id)).dump(); }
    std::string verify() const { return to_json(verify_exactness(state_)).dump(); }
    std::string summary(bool with_accuracy) const { return summary_json(state_, with_accuracy).dump(); }
    double held_in() const { return evaluate(state_, EvalMode::held_in).aggregate; }
    double held_out() const { return evaluate(state_, EvalMode::held_out).aggregate; }
    double zeroshot() const { return zeroshot_accuracy(state_); }
    std::vector<TaskId> retained() const { return state_.retained(); }
    std::vector<TaskId> unlearned() const { return state_.unlearned; }
    py::bytes checkpoint() const { return py::bytes(encode_checkpoint(make_checkpoint(cfg_, state_))); }
    std::vector<std::int64_t> accumulator(std::size_t group) const {
        const auto v = state_.groups.at(group).merged.accumulator.view();
        return {v.begin(), v.end()};
    }

private:
    RunConfig cfg_;
    SystemState state_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Exact unlearning through model merging with sign-fixed masks";

    // Later registrations are tried first, so the base class goes first.
    auto base = py::register_exception<Error>(m, "SiftMasksError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ExactnessError>(m, "ExactnessError", base.ptr());

    m.def("quantize", py::overload_cast<double, int>(&quantize), py::arg("x"), py::arg("scale_bits") = kDefaultScaleBits);
    m.def("dequantize", &dequantize, py::arg("q"), py::arg("scale_bits") = kDefaultScaleBits);

    m.def(
        "storage_words",
        [](const std::string& method, std::size_t m, std::size_t tasks) {
            return storage_words(method_tag_from_string(method), m, tasks).words();
        },
        py::arg("method"), py::arg("param_count"), py::arg("tasks"));

    m.def(
        "project_total_cost",
        [](std::size_t tasks, const std::string& method, int steps) {
            const CostProjection p = project_total_cost(tasks, method_tag_from_string(method), steps);
            py::dict d;
            d["per_deletion"] = p.per_deletion;
            d["cumulative"] = p.cumulative;
            d["total_finetunes"] = p.total_finetunes;
            d["total_steps"] = p.total_steps;
            return d;
        },
        py::arg("tasks"), py::arg("method"), py::arg("steps") = 20);

    m.def(
        "tall_mask",
        [](const std::vector<float>& tau, const std::vector<float>& total, double lambda) {
            return bools(tall_mask(quantize(ParamVector(tau)), quantize(ParamVector(total)), lambda));
        },
        py::arg("tau"), py::arg("total"), py::arg("lam"));

    m.def(
        "emr_build",
        [](const std::vector<std::vector<float>>& taus) {
            const EmrResult r = emr_build(to_task_vectors(taus));
            std::vector<std::vector<bool>> masks;
            std::vector<double> scales;
            for (const auto& [id, mask] : r.masks) {
                masks.push_back(bools(mask));
                scales.push_back(r.scales.at(id));
            }
            return py::make_tuple(r.unified.values(), masks, scales);
        },
        py::arg("taus"));

    m.def(
        "ties_merge",
        [](const std::vector<std::vector<float>>& taus, double density) {
            return ties_merge(to_task_vectors(taus), density).values();
        },
        py::arg("taus"), py::arg("density"));

    py::class_<System>(m, "System")
        .def(py::init<const std::string&>(), py::arg("config_json"))
        .def("unlearn", &System::unlearn_task, py::arg("task_id"))
        .def("verify", &System::verify)
        .def("summary", &System::summary, py::arg("with_accuracy") = true)
        .def("held_in", &System::held_in)
        .def("held_out", &System::held_out)
        .def("zeroshot", &System::zeroshot)
        .def("retained", &System::retained)
        .def("unlearned", &System::unlearned)
        .def("checkpoint", &System::checkpoint)
        .def("accumulator", &System::accumulator, py::arg("group") = 0);
}
