#pragma once

#include <csignal>
#include <cstdio>
#include <string>

#include <fcntl.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "common.hpp"

namespace spurank {

/// Child process run through `/bin/sh -c`, spoken to one line at a time over
/// its stdin/stdout. stderr is inherited.
class LineProcess {
public:
    explicit LineProcess(std::string command) : command_(std::move(command)) { start(); }
    ~LineProcess() { stop(); }

    LineProcess(const LineProcess&) = delete;
    LineProcess& operator=(const LineProcess&) = delete;

    const std::string& command() const { return command_; }
    bool running() const { return pid_ > 0; }

    void restart() {
        stop();
        start();
    }

    /// Sends one line and reads one line back. Throws Error(backend) if the
    /// child has exited or closed its output.
    std::string transact(const std::string& line) {
        if (!running()) throw Error(ErrorKind::backend, "backend process not running: " + command_);
        std::string msg = line;
        msg.push_back('\n');
        if (std::fwrite(msg.data(), 1, msg.size(), to_child_) != msg.size() || std::fflush(to_child_) != 0)
            throw Error(ErrorKind::backend, "backend closed its input: " + command_);
        std::string reply;
        int ch;
        while ((ch = std::fgetc(from_child_)) != EOF) {
            if (ch == '\n') return reply;
            reply.push_back(static_cast<char>(ch));
        }
        throw Error(ErrorKind::backend, "backend exited without replying: " + command_);
    }

private:
    void start() {
        std::signal(SIGPIPE, SIG_IGN);
        int in_pipe[2], out_pipe[2];
        if (pipe(in_pipe) != 0) throw Error(ErrorKind::backend, "pipe() failed");
        if (pipe(out_pipe) != 0) {
            close(in_pipe[0]);
            close(in_pipe[1]);
            throw Error(ErrorKind::backend, "pipe() failed");
        }
        pid_t pid = fork();
        if (pid < 0) throw Error(ErrorKind::backend, "fork() failed");
        if (pid == 0) {
            dup2(in_pipe[0], STDIN_FILENO);
            dup2(out_pipe[1], STDOUT_FILENO);
            close(in_pipe[0]);
            close(in_pipe[1]);
            close(out_pipe[0]);
            close(out_pipe[1]);
            execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
            _exit(127);
        }
        close(in_pipe[0]);
        close(out_pipe[1]);
        fcntl(in_pipe[1], F_SETFD, FD_CLOEXEC);
        fcntl(out_pipe[0], F_SETFD, FD_CLOEXEC);
        to_child_ = fdopen(in_pipe[1], "w");
        from_child_ = fdopen(out_pipe[0], "r");
        pid_ = pid;
    }

    void stop() {
        if (to_child_) std::fclose(to_child_);
        if (from_child_) std::fclose(from_child_);
        to_child_ = from_child_ = nullptr;
        if (pid_ > 0) {
            int status = 0;
            waitpid(pid_, &status, 0);
        }
        pid_ = -1;
    }

    std::string command_;
    pid_t pid_ = -1;
    std::FILE* to_child_ = nullptr;
    std::FILE* from_child_ = nullptr;
};

}  // namespace spurank
